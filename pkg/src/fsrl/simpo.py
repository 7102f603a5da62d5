"""SimPO objective, adapter training with a steering penalty, and the full fine-tune baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import KeepFn, SteeringAdapter, SteeringHook, ste_l0_loss, steering_l1
from .autodiff import Tensor, as_tensor, backward, no_grad, ops, reset_tape
from .data import PreferenceTriplet, pad_batch
from .errors import DivergenceError, FrozenParameterError
from .lm import FrozenLM, Intervention, batch_avg_logprob
from .optim import Adam, cosine_lr
from .rng import stream
from .sae import SparseAutoencoder


@dataclass(frozen=True)
class SimPOConfig:
    beta: float = 10.0
    gamma_ratio: float = 0.5
    alpha_steer: float = 0.1
    lr: float = 5e-3
    baseline_lr_ratio: float = 0.04  # full fine-tune lr = lr * ratio
    epochs: int = 3
    batch: int = 16
    grad_accum: int = 1
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0
    theta_lr_mult: float = 10.0  # jump_relu thresholds only
    seed: int = 0

    @property
    def gamma(self) -> float:
        return self.gamma_ratio * self.beta

    def validate(self) -> None:
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        for name in ("gamma_ratio", "alpha_steer", "weight_decay", "warmup_ratio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr", "baseline_lr_ratio", "batch", "grad_accum", "theta_lr_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def simpo_from_logprobs(chosen_avg, rejected_avg, beta: float, gamma: float) -> Tensor:
    """Mean of -log sigmoid(beta * (chosen_avg - rejected_avg) - gamma)."""
    margin = beta * (as_tensor(chosen_avg) - as_tensor(rejected_avg)) - gamma
    return -ops.mean(ops.log_sigmoid(margin))


def _pair_batch(triplets: Sequence[PreferenceTriplet]):
    if not triplets:
        raise ValueError("empty triplet batch")
    pairs = [t.sequences() for t in triplets]
    return pad_batch([c for c, _ in pairs] + [r for _, r in pairs])


def simpo_loss(
    model: FrozenLM,
    triplets: Sequence[PreferenceTriplet],
    cfg: SimPOConfig,
    intervention: Intervention | None = None,
) -> Tensor:
    """SimPO loss of ``model`` (optionally steered) on one batch of triplets.

    Chosen and rejected continuations share one padded forward pass; the
    intervention therefore applies at every prompt and response position.
    """
    batch = _pair_batch(triplets)
    avg = batch_avg_logprob(model, batch, intervention)
    if not np.isfinite(avg.data).all():
        raise ValueError("non-finite log-probabilities")
    n = len(triplets)
    return simpo_from_logprobs(avg[:n], avg[n:], cfg.beta, cfg.gamma)


def steered_simpo_loss(
    model: FrozenLM,
    sae: SparseAutoencoder,
    adapter: SteeringAdapter,
    triplets: Sequence[PreferenceTriplet],
    cfg: SimPOConfig,
    keep: KeepFn | None = None,
) -> Tensor:
    return simpo_loss(model, triplets, cfg, SteeringHook(sae, adapter, keep=keep))


def evaluate_simpo(
    model: FrozenLM,
    triplets: Sequence[PreferenceTriplet],
    cfg: SimPOConfig,
    intervention: Intervention | None = None,
    batch_size: int = 64,
) -> float:
    """Mean SimPO loss over ``triplets`` without recording gradients."""
    if not triplets:
        raise ValueError("no triplets to evaluate")
    total = 0.0
    with no_grad():
        for i in range(0, len(triplets), batch_size):
            chunk = triplets[i : i + batch_size]
            total += simpo_loss(model, chunk, cfg, intervention).item() * len(chunk)
    return total / len(triplets)


def steering_objective(
    model: FrozenLM,
    sae: SparseAutoencoder,
    adapter: SteeringAdapter,
    triplets: Sequence[PreferenceTriplet],
    cfg: SimPOConfig,
) -> tuple[Tensor, Tensor, dict]:
    """(total objective, SimPO part, batch stats) for one batch.

    The sparsity penalty is ``alpha_steer`` times the per-token mean of
    ||v||_1 (or of the STE l0 count for jump_relu) over non-padding positions.
    """
    batch = _pair_batch(triplets)
    hook = SteeringHook(sae, adapter)
    avg = batch_avg_logprob(model, batch, hook)
    n = len(triplets)
    simpo = simpo_from_logprobs(avg[:n], avg[n:], cfg.beta, cfg.gamma)
    valid = batch.valid.astype(np.float64)
    n_tok = valid.sum()
    if adapter.variant == "jump_relu":
        sparsity = ops.sum(ste_l0_loss(adapter, hook.last_z) * valid) / n_tok
    else:
        sparsity = ops.sum(steering_l1(hook.last_v) * valid) / n_tok
    total = simpo + cfg.alpha_steer * sparsity if cfg.alpha_steer else simpo
    v = hook.last_v.data
    stats = {
        "l0": float((np.count_nonzero(v, axis=-1) * valid).sum() / n_tok),
        "l1": float((np.abs(v).sum(axis=-1) * valid).sum() / n_tok),
    }
    return total, simpo, stats


def _check_frozen(model: FrozenLM, sae: SparseAutoencoder) -> None:
    if not model.frozen or any(p.requires_grad for p in model.parameters()):
        raise ValueError("base model must be frozen")
    if any(p.requires_grad for p in sae.parameters()):
        raise ValueError("SAE must be frozen")


def _batches(rng: np.random.Generator, n: int, size: int):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)  # step, loss, l0, l1
    val_loss: float = math.nan
    initial_val_loss: float = math.nan

    @property
    def improved(self) -> bool:
        return self.val_loss < self.initial_val_loss


@dataclass
class AdapterTrainResult(TrainResult):
    adapter: SteeringAdapter | None = None
    mean_l0: float = math.nan


@dataclass
class BaselineTrainResult(TrainResult):
    model: FrozenLM | None = None


def train_adapter(
    model: FrozenLM,
    sae: SparseAutoencoder,
    adapter: SteeringAdapter,
    train: Sequence[PreferenceTriplet],
    val: Sequence[PreferenceTriplet],
    cfg: SimPOConfig,
) -> AdapterTrainResult:
    """Optimise the adapter in place against SimPO plus the sparsity penalty."""
    cfg.validate()
    if cfg.epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {cfg.epochs}")
    if not train or not val:
        raise ValueError("train and val sets must be non-empty")
    _check_frozen(model, sae)
    model_digest, sae_digest = model.digest(), sae.digest()

    result = AdapterTrainResult(adapter=adapter)
    result.initial_val_loss = evaluate_simpo(model, val, cfg)
    lr_scale = [1.0, 1.0, cfg.theta_lr_mult if adapter.variant == "jump_relu" else 1.0]
    opt = Adam(adapter.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, lr_scale=lr_scale)
    rng = stream(cfg.seed, "adapter.batches")
    n_micro = math.ceil(len(train) / cfg.batch)
    total_steps = cfg.epochs * math.ceil(n_micro / cfg.grad_accum)
    step = 0
    for _ in range(cfg.epochs):
        micro = _batches(rng, len(train), cfg.batch)
        for start in range(0, len(micro), cfg.grad_accum):
            group = micro[start : start + cfg.grad_accum]
            opt.zero_grad()
            acc = {"loss": 0.0, "l0": 0.0, "l1": 0.0}
            for idx in group:
                reset_tape()
                total, simpo, stats = steering_objective(model, sae, adapter, [train[i] for i in idx], cfg)
                if not np.isfinite(total.item()):
                    raise DivergenceError(step)
                backward(total * (1.0 / len(group)))
                acc["loss"] += simpo.item() / len(group)
                acc["l0"] += stats["l0"] / len(group)
                acc["l1"] += stats["l1"] / len(group)
            opt.step(cosine_lr(step, total_steps, cfg.lr, cfg.warmup_ratio))
            adapter.clamp_theta()
            result.log.append({"step": step, **acc})
            step += 1
    reset_tape()
    if model.digest() != model_digest or sae.digest() != sae_digest:
        raise FrozenParameterError("frozen model or SAE parameters changed during adapter training")
    hook = SteeringHook(sae, adapter)
    result.val_loss = evaluate_simpo(model, val, cfg, hook)
    result.mean_l0 = mean_steering_l0(model, sae, adapter, val)
    return result


def mean_steering_l0(
    model: FrozenLM, sae: SparseAutoencoder, adapter: SteeringAdapter, triplets: Sequence[PreferenceTriplet]
) -> float:
    """Average count of nonzero steering entries per token over prompt+chosen and prompt+rejected."""
    counts, n = 0.0, 0.0
    with no_grad():
        for i in range(0, len(triplets), 64):
            batch = _pair_batch(triplets[i : i + 64])
            acts = model.hook_activations(batch.tokens)
            v = adapter(acts).data
            counts += np.count_nonzero(v, axis=-1)[batch.valid].sum()
            n += batch.valid.sum()
    return float(counts / n)


def train_full_baseline(
    model: FrozenLM,
    train: Sequence[PreferenceTriplet],
    val: Sequence[PreferenceTriplet],
    cfg: SimPOConfig,
) -> BaselineTrainResult:
    """Fine-tune a thawed copy of ``model`` on SimPO at ``lr * baseline_lr_ratio``."""
    cfg.validate()
    if cfg.epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {cfg.epochs}")
    if not train or not val:
        raise ValueError("train and val sets must be non-empty")
    original = model.digest()
    tuned = model.thawed_copy()
    lr = cfg.lr * cfg.baseline_lr_ratio
    result = BaselineTrainResult(model=tuned)
    result.initial_val_loss = evaluate_simpo(model, val, cfg)
    opt = Adam(tuned.parameters(), lr=lr, weight_decay=cfg.weight_decay)
    rng = stream(cfg.seed, "baseline.batches")
    n_micro = math.ceil(len(train) / cfg.batch)
    total_steps = cfg.epochs * math.ceil(n_micro / cfg.grad_accum)
    step = 0
    for _ in range(cfg.epochs):
        micro = _batches(rng, len(train), cfg.batch)
        for start in range(0, len(micro), cfg.grad_accum):
            group = micro[start : start + cfg.grad_accum]
            opt.zero_grad()
            acc = 0.0
            for idx in group:
                reset_tape()
                loss = simpo_loss(tuned, [train[i] for i in idx], cfg)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(step)
                backward(loss * (1.0 / len(group)))
                acc += loss.item() / len(group)
            opt.step(cosine_lr(step, total_steps, lr, cfg.warmup_ratio))
            result.log.append({"step": step, "loss": acc, "l0": 0.0, "l1": 0.0})
            step += 1
    reset_tape()
    if model.digest() != original:
        raise FrozenParameterError("original model changed during baseline fine-tuning")
    tuned.freeze()
    result.val_loss = evaluate_simpo(tuned, val, cfg)
    return result
