"""Run configuration: typed sections loaded from JSON, validated before any compute.

Unknown keys and wrongly typed values are rejected with the dotted path of the
offending entry. Command-line flags are applied on top via :func:`override`.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .adapter import VARIANTS
from .data import DataSpec
from .lm import LMConfig
from .sae import SAETrainConfig
from .simpo import SimPOConfig


class ConfigError(ValueError):
    """The run configuration failed schema validation."""


@dataclass
class DataSection:
    n_corpus: int = 8000
    n_train: int = 2000
    n_val: int = 400
    letters: str = "abcdefghijkl"
    min_len: int = 3
    max_len: int = 6
    style_corruption_rate: float = 0.5
    content_corruption_rate: float = 0.2
    corpus_bad_style_prob: float = 0.7
    corpus_noise_rate: float = 0.1

    def spec(self) -> DataSpec:
        names = {f.name for f in dataclasses.fields(DataSpec)}
        return DataSpec(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class LMSection:
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 128
    context_len: int = 32
    hook_layer: int = 2
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 32

    def lm_config(self) -> LMConfig:
        names = {f.name for f in dataclasses.fields(LMConfig)} - {"vocab_size"}
        return LMConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class SAESection:
    alpha_sae: float = 0.02
    lr: float = 2e-3
    steps: int = 2000
    batch: int = 256
    expansion: int = 8
    n_docs: int = 3000  # corpus documents used for activations

    def train_config(self, seed: int) -> SAETrainConfig:
        return SAETrainConfig(self.alpha_sae, self.lr, self.steps, self.batch, seed, self.expansion)


@dataclass
class SimPOSection:
    variant: str = "soft_threshold"
    beta: float = 10.0
    gamma_ratio: float = 0.5
    alpha_steer: float = 0.1
    lr: float = 5e-3
    baseline_lr_ratio: float = 0.04
    epochs: int = 3
    batch: int = 16
    grad_accum: int = 1
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0
    theta_lr_mult: float = 10.0

    def simpo_config(self, seed: int) -> SimPOConfig:
        names = {f.name for f in dataclasses.fields(SimPOConfig)}
        return SimPOConfig(**{k: v for k, v in asdict(self).items() if k in names}, seed=seed)


@dataclass
class AnalysisSection:
    mask_ratio: float = 2.0
    n_boot: int = 1000
    topk_pcts: list[float] = field(default_factory=lambda: [0.1 * 2**i for i in range(8)])
    sweep_layers: list[int] = field(default_factory=lambda: [1, 2, 3])
    sweep_alphas: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    sweep_variants: list[str] = field(default_factory=lambda: list(VARIANTS))


@dataclass
class TheorySection:
    n_trials: int = 100
    d: int = 16
    d_sae: int = 64
    n_deltas: int = 100


@dataclass
class GradcheckSection:
    n_instances: int = 120
    h: float = 1e-5
    tol: float = 1e-4


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    lm: LMSection = field(default_factory=LMSection)
    sae: SAESection = field(default_factory=SAESection)
    simpo: SimPOSection = field(default_factory=SimPOSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    theory: TheorySection = field(default_factory=TheorySection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        try:
            self.data.spec().validate()
            self.lm.lm_config().validate()
            self.sae.train_config(self.seed).validate()
            self.simpo.simpo_config(self.seed).validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        checks = [
            (self.data.n_corpus >= 1, "data.n_corpus must be >= 1"),
            (self.data.n_train >= 1 and self.data.n_val >= 1, "data.n_train and data.n_val must be >= 1"),
            (self.lm.steps >= 1 and self.lm.lr > 0 and self.lm.batch_size >= 1, "lm.steps, lm.lr, lm.batch_size must be positive"),
            (self.sae.n_docs >= 1, "sae.n_docs must be >= 1"),
            (self.simpo.variant in VARIANTS, f"simpo.variant must be one of {VARIANTS}"),
            (self.simpo.epochs >= 1, "simpo.epochs must be >= 1"),
            (self.analysis.mask_ratio >= 1, "analysis.mask_ratio must be >= 1"),
            (self.analysis.n_boot >= 2, "analysis.n_boot must be >= 2"),
            (all(0 < k <= 100 for k in self.analysis.topk_pcts), "analysis.topk_pcts must lie in (0, 100]"),
            (all(0 <= x < self.lm.n_layers for x in self.analysis.sweep_layers), "analysis.sweep_layers out of range"),
            (all(a >= 0 for a in self.analysis.sweep_alphas), "analysis.sweep_alphas must be >= 0"),
            (all(v in VARIANTS for v in self.analysis.sweep_variants), f"analysis.sweep_variants must be in {VARIANTS}"),
            (self.theory.n_trials >= 1 and 1 <= self.theory.d < self.theory.d_sae, "theory: need n_trials >= 1 and d < d_sae"),
            (self.gradcheck.n_instances >= 1 and self.gradcheck.h > 0, "gradcheck: need n_instances >= 1 and h > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(tp)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in raw.items()}
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "").validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return from_dict(raw)


def override(cfg: RunConfig, dotted: dict[str, Any]) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides (``None`` values are skipped) and revalidate."""
    raw = cfg.to_dict()
    for key, value in dotted.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown key {key}")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown key {key}")
        node[leaf] = value
    return from_dict(raw)
