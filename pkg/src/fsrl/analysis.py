"""Measurements over a trained adapter: category composition, category ablation,
static top-k steering, feature-usage distribution, and hyperparameter sweeps."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .adapter import SteeringAdapter, SteeringHook
from .autodiff import no_grad
from .data import CLASSES, PreferenceTriplet, pad_batch
from .lm import FrozenLM
from .sae import SparseAutoencoder, encode
from .simpo import SimPOConfig, evaluate_simpo

CONTEXTS = ("prompt_only", "prompt_chosen", "prompt_rejected")
CATEGORIES = tuple(c for c in CLASSES if c != "other")
DEFAULT_TOPK_PCTS = tuple(0.1 * 2**i for i in range(8))  # 0.1% .. 12.8%


# -- category masks -----------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureCategoryMask:
    name: str
    members: tuple[int, ...]
    d_sae: int

    def __post_init__(self):
        m = tuple(int(i) for i in self.members)
        if len(set(m)) != len(m):
            raise ValueError(f"mask {self.name!r} has duplicate indices")
        if any(i < 0 or i >= self.d_sae for i in m):
            raise ValueError(f"mask {self.name!r} has indices outside [0, {self.d_sae})")
        object.__setattr__(self, "members", tuple(sorted(m)))

    def __len__(self) -> int:
        return len(self.members)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.d_sae, dtype=bool)
        out[list(self.members)] = True
        return out


def write_masks(path: str | Path, masks: Iterable[FeatureCategoryMask]) -> None:
    """One line per mask: ``name d_sae idx idx ...`` (indices ascending)."""
    lines = [" ".join([m.name, str(m.d_sae), *map(str, m.members)]) for m in masks]
    Path(path).write_text("\n".join(lines) + "\n")


def read_masks(path: str | Path) -> dict[str, FeatureCategoryMask]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, d_sae, *idx = line.split()
        out[name] = FeatureCategoryMask(name, tuple(int(i) for i in idx), int(d_sae))
    return out


@dataclass
class TokenView:
    """Per-token SAE features, steering vectors and labels for one context."""

    f: np.ndarray  # [N, d_sae]
    v: np.ndarray  # [N, d_sae]
    labels: np.ndarray  # [N] of class names


def _context_tokens(
    model: FrozenLM, sae: SparseAutoencoder, adapter: SteeringAdapter | None, triplets: Sequence[PreferenceTriplet]
) -> dict[str, TokenView]:
    parts: dict[str, list] = {c: [] for c in CONTEXTS}
    with no_grad():
        for i in range(0, len(triplets), 128):
            chunk = triplets[i : i + 128]
            pairs = [t.sequences() for t in chunk]
            for ctx, seqs in (("prompt_chosen", [c for c, _ in pairs]), ("prompt_rejected", [r for _, r in pairs])):
                batch = pad_batch(seqs)
                acts = model.hook_activations(batch.tokens)
                f = encode(sae, acts).data
                v = adapter(acts).data if adapter is not None else np.zeros_like(f)
                for b, t in enumerate(chunk):
                    labels = np.array(t.labels())
                    n = len(labels)
                    parts[ctx].append((f[b, :n], v[b, :n], labels))
                    if ctx == "prompt_chosen":
                        p = len(t.prompt)
                        parts["prompt_only"].append((f[b, :p], v[b, :p], labels[:p]))
    return {
        ctx: TokenView(*(np.concatenate([row[j] for row in rows]) for j in range(3)))
        for ctx, rows in parts.items()
    }


def derive_category_masks(
    sae: SparseAutoencoder,
    model: FrozenLM,
    triplets: Sequence[PreferenceTriplet],
    ratio: float = 2.0,
    categories: Sequence[str] = CATEGORIES,
) -> dict[str, FeatureCategoryMask]:
    """A feature belongs to category C when its mean activation on C-labelled
    tokens exceeds ``ratio`` times its mean activation on all other tokens.

    Uses every token of prompt+chosen and prompt+rejected. Column sums are
    taken over sorted values so the result does not depend on corpus order.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if not triplets:
        raise ValueError("no triplets")
    views = _context_tokens(model, sae, None, triplets)
    f = np.concatenate([views["prompt_chosen"].f, views["prompt_rejected"].f])
    labels = np.concatenate([views["prompt_chosen"].labels, views["prompt_rejected"].labels])
    out = {}
    for cat in categories:
        inside = labels == cat
        if not inside.any():
            raise ValueError(f"no tokens labelled {cat!r}")
        if inside.all():
            raise ValueError(f"every token is labelled {cat!r}; nothing to compare against")
        mean_in = np.sort(f[inside], axis=0).sum(axis=0) / inside.sum()
        mean_out = np.sort(f[~inside], axis=0).sum(axis=0) / (~inside).sum()
        members = np.flatnonzero((mean_in > 0) & (mean_in > ratio * mean_out))
        out[cat] = FeatureCategoryMask(cat, tuple(members.tolist()), sae.d_sae)
    return out


# -- composition ----------------------------------------------------------------------------


def token_proportions(active: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-token |active & mask| / |active|; NaN where nothing is active."""
    active = np.asarray(active, dtype=bool)
    n_act = active.sum(axis=-1)
    hits = (active & mask).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_act > 0, hits / np.maximum(n_act, 1), np.nan)


def composition_metric(active_sets: Iterable[Iterable[int]], mask: Iterable[int]) -> float:
    """Mean over tokens of |active ∩ mask| / |active|, skipping empty sets."""
    mask = set(mask)
    props = []
    for s in active_sets:
        s = set(s)
        if s:
            props.append(len(s & mask) / len(s))
    if not props:
        raise ValueError("all active sets are empty")
    return float(np.mean(props))


@dataclass
class CompositionReport:
    context: str
    category: str
    sae_baseline_pct: float | None
    steered_pct: float | None
    relative_change_pct: float | None
    sae_baseline_se: float | None
    steered_se: float | None
    relative_change_se: float | None
    n_tokens: int
    n_baseline_active: int
    n_steered_active: int
    note: str = ""


def _bootstrap_means(props: np.ndarray, idx_chunks) -> np.ndarray:
    return np.concatenate([np.nanmean(props[idx], axis=1) for idx in idx_chunks])


def composition_report(
    model: FrozenLM,
    sae: SparseAutoencoder,
    adapter: SteeringAdapter,
    triplets: Sequence[PreferenceTriplet],
    masks: Mapping[str, FeatureCategoryMask],
    n_boot: int = 1000,
    seed: int = 0,
) -> list[CompositionReport]:
    """Proportion of active features in each category, SAE (f > 0) vs steering (v != 0).

    Standard errors come from a token-level bootstrap with ``n_boot`` resamples;
    baseline and steered proportions share the resampled token indices.
    """
    views = _context_tokens(model, sae, adapter, triplets)
    reports = []
    for ctx in CONTEXTS:
        view = views[ctx]
        N = len(view.labels)
        if N == 0:
            raise ValueError(f"context {ctx} has no tokens")
        rng = np.random.default_rng([seed, CONTEXTS.index(ctx)])
        chunks = [rng.integers(0, N, size=(min(100, n_boot - s), N)) for s in range(0, n_boot, 100)]
        for name, mask in masks.items():
            mb = mask.as_bool()
            pb = token_proportions(view.f > 0, mb)
            ps = token_proportions(view.v != 0, mb)
            nb, ns = int(np.isfinite(pb).sum()), int(np.isfinite(ps).sum())
            rep = CompositionReport(ctx, name, None, None, None, None, None, None, N, nb, ns)
            if nb:
                rep.sae_baseline_pct = float(np.nanmean(pb) * 100)
            if ns:
                rep.steered_pct = float(np.nanmean(ps) * 100)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)  # empty resamples give NaN means
                boot_b = _bootstrap_means(pb, chunks) * 100 if nb else None
                boot_s = _bootstrap_means(ps, chunks) * 100 if ns else None
            if boot_b is not None:
                rep.sae_baseline_se = float(np.nanstd(boot_b, ddof=1))
            if boot_s is not None:
                rep.steered_se = float(np.nanstd(boot_s, ddof=1))
            if not ns:
                rep.note = "steering vector is zero on every token; relative change undefined"
            elif not nb or rep.sae_baseline_pct == 0:
                rep.note = "baseline proportion is zero; relative change undefined"
            else:
                rep.relative_change_pct = (rep.steered_pct - rep.sae_baseline_pct) / rep.sae_baseline_pct * 100
                with np.errstate(invalid="ignore", divide="ignore"):
                    rel = (boot_s - boot_b) / boot_b * 100
                rep.relative_change_se = float(np.nanstd(rel[np.isfinite(rel)], ddof=1))
            reports.append(rep)
    return reports


# -- ablation ------------------------------------------------------------------------------


def _constant_keep(keep: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    return lambda v: np.broadcast_to(keep, v.shape)


@dataclass(frozen=True)
class AblationResult:
    ablated: tuple[str, ...]
    loss: float
    full_loss: float
    features_ablated: int
    loss_per_feature: float | None  # None when nothing was ablated


def steered_loss(
    model: FrozenLM,
    sae: SparseAutoencoder,
    adapter: SteeringAdapter,
    triplets: Sequence[PreferenceTriplet],
    cfg: SimPOConfig,
    keep: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    return evaluate_simpo(model, triplets, cfg, SteeringHook(sae, adapter, keep=keep))


def ablate_categories(
    model: FrozenLM,
    sae: SparseAutoencoder,
    adapter: SteeringAdapter,
    triplets: Sequence[PreferenceTriplet],
    masks_to_ablate: Sequence[FeatureCategoryMask],
    cfg: SimPOConfig,
    full_loss: float | None = None,
) -> AblationResult:
    """Validation SimPO loss with steering entries of the masked features zeroed."""
    union = np.zeros(adapter.d_sae, dtype=bool)
    for m in masks_to_ablate:
        if m.d_sae != adapter.d_sae:
            raise ValueError(f"mask {m.name!r} is over {m.d_sae} features, adapter has {adapter.d_sae}")
        union |= m.as_bool()
    if full_loss is None:
        full_loss = steered_loss(model, sae, adapter, triplets, cfg)
    count = int(union.sum())
    loss = steered_loss(model, sae, adapter, triplets, cfg, _constant_keep(~union)) if count else full_loss
    per = (loss - full_loss) / count if count else None
    return AblationResult(tuple(m.name for m in masks_to_ablate), loss, full_loss, count, per)


def category_interaction(l_union: float, l_a: float, l_b: float, l_full: float) -> float:
    """L(A∪B) - L(A) - L(B) + L(full); positive means ablating both hurts more than the sum."""
    return l_union - l_a - l_b + l_full


# -- static top-k ---------------------------------------------------------------------------


def topk_count(k_pct: float, d_sae: int) -> int:
    if not 0 < k_pct <= 100:
        raise ValueError(f"k_pct must lie in (0, 100], got {k_pct}")
    return min(d_sae, math.ceil(round(k_pct / 100 * d_sae, 9)))


def topk_keep_mask(v: np.ndarray, count: int) -> np.ndarray:
    """Keep the ``count`` largest |v| entries per row; ties go to the lower index."""
    v = np.asarray(v)
    order = np.argsort(-np.abs(v), axis=-1, kind="stable")[..., :count]
    keep = np.zeros(v.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    return keep


def apply_topk(v: np.ndarray, k_pct: float) -> np.ndarray:
    v = np.asarray(v)
    return np.where(topk_keep_mask(v, topk_count(k_pct, v.shape[-1])), v, 0.0)


@dataclass(frozen=True)
class TopKPoint:
    k_pct: float
    keep_count: int
    mean_l0: float
    loss: float


@dataclass
class TopKCurve:
    points: list[TopKPoint]
    dynamic_l0: float
    dynamic_l0_frac: float
    full_loss: float
    unsteered_loss: float


def _mean_l0(model, adapter, triplets, keep=None) -> float:
    counts, n = 0.0, 0.0
    with no_grad():
        for i in range(0, len(triplets), 64):
            pairs = [t.sequences() for t in triplets[i : i + 64]]
            batch = pad_batch([c for c, _ in pairs] + [r for _, r in pairs])
            v = adapter(model.hook_activations(batch.tokens)).data
            if keep is not None:
                v = np.where(keep(v), v, 0.0)
            counts += np.count_nonzero(v, axis=-1)[batch.valid].sum()
            n += batch.valid.sum()
    return float(counts / n)


def static_topk_baseline(
    model: FrozenLM,
    sae: SparseAutoencoder,
    adapter: SteeringAdapter,
    triplets: Sequence[PreferenceTriplet],
    cfg: SimPOConfig,
    k_pcts: Sequence[float] = DEFAULT_TOPK_PCTS,
) -> TopKCurve:
    """Loss when each token keeps only its top-k% steering entries by magnitude."""
    if not k_pcts:
        raise ValueError("no k values given")
    counts = [topk_count(k, adapter.d_sae) for k in k_pcts]
    full = steered_loss(model, sae, adapter, triplets, cfg)
    points = []
    for k, count in zip(k_pcts, counts):
        keep = None if count == adapter.d_sae else (lambda v, c=count: topk_keep_mask(v, c))
        loss = full if keep is None else steered_loss(model, sae, adapter, triplets, cfg, keep)
        points.append(TopKPoint(float(k), count, _mean_l0(model, adapter, triplets, keep), loss))
    dyn = _mean_l0(model, adapter, triplets)
    return TopKCurve(points, dyn, dyn / adapter.d_sae, full, evaluate_simpo(model, triplets, cfg))


# -- usage distribution ---------------------------------------------------------------------


@dataclass(frozen=True)
class UsageFit:
    features: np.ndarray  # feature indices in descending frequency order
    freqs: np.ndarray  # matching frequencies
    slope: float
    intercept: float
    r2: float
    n_fit: int


def fit_log_linear(freqs: np.ndarray) -> tuple[float, float, float]:
    """Least-squares fit of ln(freq) = intercept + slope * rank over freq > 0."""
    freqs = np.asarray(freqs, dtype=np.float64)
    ranks = np.flatnonzero(freqs > 0).astype(np.float64)
    if len(ranks) < 2:
        raise ValueError("need at least two features with nonzero usage")
    y = np.log(freqs[freqs > 0])
    X = np.stack([np.ones_like(ranks), ranks], axis=1)
    (intercept, slope), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ np.array([intercept, slope])
    ss_res, ss_tot = float(resid @ resid), float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def usage_distribution(v: np.ndarray, features: Sequence[int] | None = None) -> UsageFit:
    """Per-feature fraction of tokens with v_i != 0, ranked, with a log-linear fit.

    ``v`` is ``[N, d_sae]``. ``features`` restricts the analysis to a subset
    (for per-category distributions). Ties in frequency rank by feature index.
    """
    v = np.asarray(v)
    if v.ndim != 2 or len(v) == 0:
        raise ValueError(f"expected a non-empty [N, d_sae] array, got shape {v.shape}")
    idx = np.arange(v.shape[1]) if features is None else np.asarray(sorted(features), dtype=int)
    freq = (v[:, idx] != 0).mean(axis=0)
    if not freq.any():
        raise ValueError("steering never uses any of the selected features")
    order = np.argsort(-freq, kind="stable")
    ranked = freq[order]
    slope, intercept, r2 = fit_log_linear(ranked)
    return UsageFit(idx[order], ranked, slope, intercept, r2, int((ranked > 0).sum()))


def usage_by_context(
    model: FrozenLM,
    sae: SparseAutoencoder,
    adapter: SteeringAdapter,
    triplets: Sequence[PreferenceTriplet],
    masks: Mapping[str, FeatureCategoryMask] | None = None,
) -> dict[tuple[str, str], UsageFit | str]:
    """Usage fits keyed by (context, subset); failures are kept as error strings."""
    views = _context_tokens(model, sae, adapter, triplets)
    subsets: dict[str, Sequence[int] | None] = {"all": None}
    for name, m in (masks or {}).items():
        subsets[name] = m.members
    out: dict[tuple[str, str], UsageFit | str] = {}
    for ctx in CONTEXTS:
        for name, feats in subsets.items():
            try:
                out[(ctx, name)] = usage_distribution(views[ctx].v, feats)
            except ValueError as e:
                out[(ctx, name)] = str(e)
    return out


# -- sweeps ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    layer: int | None = None
    alpha_steer: float | None = None
    variant: str | None = None


@dataclass
class SweepRow:
    layer: int | None
    alpha_steer: float | None
    variant: str | None
    status: str
    val_loss: float | None = None
    unsteered_val_loss: float | None = None
    mean_l0: float | None = None
    error: str = ""
    extra: dict = field(default_factory=dict)


def sweep(configs: Sequence[SweepConfig], run_one: Callable[[SweepConfig], dict]) -> list[SweepRow]:
    """Run ``run_one`` per config in order; a failing run is recorded and the sweep continues.

    ``run_one`` returns a dict with ``val_loss``, ``unsteered_val_loss`` and ``mean_l0``.
    """
    if not configs:
        raise ValueError("empty sweep")
    rows = []
    for c in configs:
        try:
            res = run_one(c)
            rows.append(
                SweepRow(
                    c.layer,
                    c.alpha_steer,
                    c.variant,
                    "ok",
                    res["val_loss"],
                    res.get("unsteered_val_loss"),
                    res["mean_l0"],
                )
            )
        except Exception as e:  # noqa: BLE001 - one bad config must not stop the sweep
            rows.append(SweepRow(c.layer, c.alpha_steer, c.variant, "failed", error=f"{type(e).__name__}: {e}"))
    return rows


def quartile_layers(n_layers: int) -> list[int]:
    """Interior quartile boundaries of the layer stack, e.g. 4 layers -> [1, 2, 3]."""
    out = sorted({round(n_layers * q / 4) for q in (1, 2, 3)})
    return [layer for layer in out if 0 < layer < n_layers]
