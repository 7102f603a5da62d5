"""Finite-difference checks of every trainable path on small random instances.

Paths: the SAE loss, the steered SimPO + l1 objective for the soft-threshold
and ReLU adapters, and SimPO through all base-model weights (the full
fine-tune path). JumpReLU thresholds are trained by a surrogate gradient and
are therefore not checked here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapter import SteeringAdapter
from .autodiff import KinkError, finite_diff_check, no_grad
from .data import DataSpec, gen_preference_data, pad_batch
from .lm import FrozenLM, LMConfig
from .rng import stream
from .sae import SparseAutoencoder, sae_loss
from .simpo import SimPOConfig, simpo_loss, steering_objective

TINY_LM = LMConfig(d_model=8, n_layers=2, n_heads=2, d_mlp=16, context_len=16, hook_layer=1)
TINY_DATA = DataSpec(letters="abcdef", min_len=2, max_len=3)
PATHS = ("sae_loss", "steered_soft_threshold", "steered_relu", "full_finetune")


@dataclass(frozen=True)
class GradRow:
    path: str
    instance: int
    param: str
    max_rel_err: float
    n_coords: int
    resamples: int


def _sae_case(rng: np.random.Generator):
    d, d_sae = 4, 12
    sae = SparseAutoencoder.random(d, d_sae, rng, b_dec=rng.normal(size=d), trainable=True)
    sae.b_enc.data[:] = rng.normal(scale=0.3, size=d_sae)
    x = rng.normal(size=(6, d))
    pre = x @ sae.W_enc.data.T + sae.b_enc.data
    return (
        lambda: sae_loss(sae, x, 0.1),
        sae.parameters(),
        list(SparseAutoencoder.PARAM_NAMES),
        lambda: float(np.abs(pre).min()),
        None,
    )


def _steered_case(rng: np.random.Generator, variant: str):
    model = FrozenLM(TINY_LM, _tiny_params(rng))
    sae = SparseAutoencoder.random(TINY_LM.d_model, 16, rng, b_dec=rng.normal(size=TINY_LM.d_model), trainable=False)
    adapter = SteeringAdapter(
        rng.normal(size=(16, TINY_LM.d_model)) / np.sqrt(TINY_LM.d_model),
        rng.normal(scale=0.1, size=16),
        rng.uniform(0.0, 0.3, size=16),
        variant,
    )
    triplets = gen_preference_data(rng, 2, TINY_DATA)
    cfg = SimPOConfig(alpha_steer=0.1)
    pairs = [t.sequences() for t in triplets]
    batch = pad_batch([c for c, _ in pairs] + [r for _, r in pairs])

    def margin() -> float:
        with no_grad():
            z = adapter.preact(model.hook_activations(batch.tokens)).data[batch.valid]
        gap = np.abs(z) if variant == "relu" else np.abs(np.abs(z) - adapter.theta.data)
        return float(gap.min())

    params = adapter.parameters() if variant != "relu" else adapter.parameters()[:2]
    names = list(SteeringAdapter.PARAM_NAMES[: len(params)])
    return lambda: steering_objective(model, sae, adapter, triplets, cfg)[0], params, names, margin, None


def _full_case(rng: np.random.Generator):
    model = FrozenLM(TINY_LM, _tiny_params(rng), trainable=True)
    triplets = gen_preference_data(rng, 2, TINY_DATA)
    cfg = SimPOConfig()
    return lambda: simpo_loss(model, triplets, cfg), model.parameters(), list(model.params), None, 4


def _tiny_params(rng: np.random.Generator) -> dict[str, np.ndarray]:
    from .lm import init_params

    params = init_params(TINY_LM, rng)
    # larger-than-init weights so every path carries a non-negligible gradient
    return {k: v + rng.normal(scale=0.2, size=v.shape) for k, v in params.items()}


CASES: dict[str, Callable] = {
    "sae_loss": _sae_case,
    "steered_soft_threshold": lambda rng: _steered_case(rng, "soft_threshold"),
    "steered_relu": lambda rng: _steered_case(rng, "relu"),
    "full_finetune": _full_case,
}


def run_gradient_suite(
    n_instances: int = 120,
    seed: int = 0,
    h: float = 1e-5,
    tol: float = 1e-4,
    paths=PATHS,
    max_resamples: int = 50,
) -> list[GradRow]:
    """Check ``n_instances`` kink-safe instances spread round-robin over ``paths``.

    The default step is 1e-5 rather than 1e-6: the SimPO margin multiplies
    log-probability gaps by beta, which amplifies round-off in the difference
    quotient more than the O(h^2) truncation error it removes.
    """
    rows = []
    for i in range(n_instances):
        path = paths[i % len(paths)]
        rng = stream(seed, f"gradsuite.{path}.{i}")
        for attempt in range(max_resamples):
            f, params, names, margin, max_coords = CASES[path](rng)
            try:
                rep = finite_diff_check(
                    f, params, h=h, tol=tol, names=names, kink_margin=margin, max_coords=max_coords, rng=rng
                )
            except KinkError:
                continue
            for name in names:
                rows.append(GradRow(path, i, name, rep.max_rel_err[name], rep.n_coords[name], attempt))
            break
        else:
            raise RuntimeError(f"no kink-safe sample for {path} after {max_resamples} attempts")
    return rows
