"""Empirical checks of the piecewise-affine structure of soft-threshold steering.

Around a reference activation ``x0`` that is not on a kink, the steering
displacement ``delta(x) = W_dec v(x)`` is exactly affine:
``x_steered = (I + A) x + c`` with ``A = W_dec diag(m) W_a`` and ``m`` the mask of
features outside their dead zone. ``A`` has rank at most ``min(k, d)``, and a
downstream weight ``W`` sees the steering as the update ``W A``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import SteeringAdapter
from .autodiff import no_grad
from .autodiff.tensor import ShapeError
from .sae import SparseAutoencoder, decode_delta

RANK_RTOL = 1e-12


@dataclass(frozen=True)
class ActiveMask:
    m: np.ndarray  # bool [d_sae]

    @property
    def k(self) -> int:
        return int(self.m.sum())


@dataclass(frozen=True)
class AffineLocalForm:
    A: np.ndarray
    c: np.ndarray
    x0: np.ndarray
    safe_radius: float
    mask: ActiveMask

    @property
    def k(self) -> int:
        return self.mask.k


def steering_delta(sae: SparseAutoencoder, adapter: SteeringAdapter, x) -> np.ndarray:
    """W_dec v(x), the displacement added to the residual stream."""
    with no_grad():
        return decode_delta(sae, adapter(np.asarray(x, dtype=np.float64))).data


def local_affine_form(sae: SparseAutoencoder, adapter: SteeringAdapter, x0) -> AffineLocalForm:
    if adapter.variant != "soft_threshold":
        raise ValueError(f"local affine form is derived for soft_threshold adapters, got {adapter.variant}")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (adapter.d,):
        raise ShapeError(f"x0 must have shape ({adapter.d},), got {x0.shape}")
    if sae.d != adapter.d or sae.d_sae != adapter.d_sae:
        raise ShapeError("SAE and adapter dimensions disagree")
    if not np.isfinite(x0).all():
        raise ValueError("x0 must be finite")
    W_a, b_a, theta = adapter.W_a.data, adapter.b_a.data, adapter.theta.data
    W_dec = sae.W_dec.data
    z0 = W_a @ x0 + b_a
    gap = np.abs(z0) - theta
    if (gap == 0).any():
        raise ValueError(f"degenerate reference point: feature(s) {np.flatnonzero(gap == 0).tolist()} on a kink")
    m = gap > 0
    psi = np.sign(z0) * np.maximum(gap, 0.0)
    A = W_dec[:, m] @ W_a[m]
    c = W_dec @ (psi - m * (W_a @ x0))
    row_norms = np.linalg.norm(W_a, axis=1)
    with np.errstate(divide="ignore"):
        radii = np.where(row_norms > 0, np.abs(gap) / row_norms, np.inf)
    return AffineLocalForm(A, c, x0, float(radii.min()), ActiveMask(m))


def numerical_rank(M: np.ndarray, scale_dim: int | None = None) -> int:
    """Count of singular values above ``scale_dim * sigma_max * 1e-12``."""
    M = np.asarray(M, dtype=np.float64)
    if not np.isfinite(M).all():
        raise ValueError("numerical_rank: non-finite input")
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0:
        return 0
    scale_dim = max(M.shape) if scale_dim is None else scale_dim
    return int((s > scale_dim * s[0] * RANK_RTOL).sum())


@dataclass(frozen=True)
class RankReport:
    k: int
    numerical_rank: int
    bound: int

    @property
    def holds(self) -> bool:
        return self.numerical_rank <= self.bound


def rank_bound_check(sae: SparseAutoencoder, adapter: SteeringAdapter, x0) -> RankReport:
    form = local_affine_form(sae, adapter, x0)
    rank = numerical_rank(form.A, max(sae.d, sae.d_sae))
    return RankReport(form.k, rank, min(form.k, sae.d))


@dataclass(frozen=True)
class WeightUpdate:
    dW: np.ndarray
    identity_error: float  # max |W x_steered - ((W + dW) x0 + W c)| at x0


def induced_weight_update(
    W, form: AffineLocalForm, sae: SparseAutoencoder | None = None, adapter: SteeringAdapter | None = None
) -> WeightUpdate:
    """dW = W A. With ``sae`` and ``adapter`` given, the identity at x0 is checked
    against a real steered forward pass; otherwise against ``(I + A) x0 + c``."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != form.A.shape[0]:
        raise ShapeError(f"W must have {form.A.shape[0]} columns, got shape {W.shape}")
    dW = W @ form.A
    x0 = form.x0
    if sae is not None and adapter is not None:
        x_steered = x0 + steering_delta(sae, adapter, x0)
    else:
        x_steered = x0 + form.A @ x0 + form.c
    err = np.abs(W @ x_steered - ((W + dW) @ x0 + W @ form.c)).max()
    return WeightUpdate(dW, float(err))


def effective_rank(updates) -> int:
    """Dimension of the span of sampled weight updates (stacked-vectorisation SVD)."""
    updates = [np.asarray(u, dtype=np.float64) for u in updates]
    if not updates:
        raise ValueError("no updates given")
    stacked = np.stack([u.ravel() for u in updates])
    return numerical_rank(stacked)


def affine_error(sae: SparseAutoencoder, adapter: SteeringAdapter, form: AffineLocalForm, delta) -> float:
    """max |delta(x0 + d) - delta(x0) - A d|."""
    delta = np.asarray(delta, dtype=np.float64)
    base = steering_delta(sae, adapter, form.x0)
    moved = steering_delta(sae, adapter, form.x0 + delta)
    return float(np.abs(moved - base - form.A @ delta).max())


def kink_crossing_delta(adapter: SteeringAdapter, form: AffineLocalForm) -> tuple[np.ndarray, int]:
    """A perturbation that moves one feature across its threshold.

    Prefers switching a dead feature on (to a shrunk magnitude of 1), which
    makes the affine prediction miss by a full decoder column; otherwise
    drives an active feature's pre-activation to zero.
    """
    W_a, theta = adapter.W_a.data, adapter.theta.data
    z0 = W_a @ form.x0 + adapter.b_a.data
    norms = np.einsum("ij,ij->i", W_a, W_a)
    m = form.mask.m
    dead = np.flatnonzero(~m & (norms > 0))
    if len(dead):
        i = int(dead[0])
        direction = np.sign(z0[i]) or 1.0
        dz = direction * (theta[i] + 1.0) - z0[i]
    else:
        live = np.flatnonzero(m & (norms > 0))
        if not len(live):
            raise ValueError("no feature can be moved across its kink")
        i = int(live[np.argmax(theta[live])])
        dz = -z0[i]
    return dz * W_a[i] / norms[i], i


@dataclass
class TheoryTrial:
    trial: int
    k: int
    rank_A: int
    rank_bound: int
    rank_dW: int
    dW_bound: int
    rank_W: int
    affine_max_err: float
    identity_err: float
    safe_radius: float
    kink_err: float

    @property
    def rank_holds(self) -> bool:
        return self.rank_A <= self.rank_bound

    @property
    def dW_holds(self) -> bool:
        return self.rank_dW <= self.dW_bound and self.rank_dW <= min(self.rank_W, self.rank_A)


def random_instance(rng: np.random.Generator, d: int, d_sae: int):
    """Random SAE, soft-threshold adapter and reference point.

    Threshold scale is drawn per instance so the number of active features
    ranges from none to more than ``d``.
    """
    sae = SparseAutoencoder.random(d, d_sae, rng, b_dec=rng.normal(size=d), trainable=False)
    W_a = rng.normal(size=(d_sae, d)) / np.sqrt(d)
    b_a = rng.normal(scale=0.1, size=d_sae)
    theta = rng.uniform(0, 1, size=d_sae) * rng.uniform(0, 4)
    adapter = SteeringAdapter(W_a, b_a, theta, "soft_threshold", trainable=False)
    return sae, adapter, rng.normal(size=d)


def run_trials(
    n_trials: int = 100,
    d: int = 16,
    d_sae: int = 64,
    seed: int = 0,
    n_deltas: int = 100,
) -> list[TheoryTrial]:
    """Random-instance verification of the affine form, rank bounds and weight update."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for t in range(n_trials):
        sae, adapter, x0 = random_instance(rng, d, d_sae)
        form = local_affine_form(sae, adapter, x0)
        err = 0.0
        if np.isfinite(form.safe_radius):
            for _ in range(n_deltas):
                u = rng.normal(size=d)
                r = form.safe_radius * rng.uniform(0.0, 0.99)
                err = max(err, affine_error(sae, adapter, form, u / np.linalg.norm(u) * r))
        d_out = int(rng.integers(1, 2 * d + 1))
        W = rng.normal(size=(d_out, d))
        if t % 4 == 0 and d_out > 1:
            W[-1] = W[0]  # occasionally rank-deficient
        upd = induced_weight_update(W, form, sae, adapter)
        rank_A = numerical_rank(form.A, max(d, d_sae))
        try:
            kdelta, _ = kink_crossing_delta(adapter, form)
            kink_err = affine_error(sae, adapter, form, kdelta)
        except ValueError:
            kink_err = float("nan")
        out.append(
            TheoryTrial(
                trial=t,
                k=form.k,
                rank_A=rank_A,
                rank_bound=min(form.k, d),
                rank_dW=numerical_rank(upd.dW, max(d_out, d, d_sae)),
                dW_bound=min(d_out, form.k),
                rank_W=numerical_rank(W),
                affine_max_err=err,
                identity_err=upd.identity_error,
                safe_radius=form.safe_radius,
                kink_err=kink_err,
            )
        )
    return out


def active_counts(adapter: SteeringAdapter, acts: np.ndarray) -> np.ndarray:
    """Per-row count of nonzero steering entries (the local k) over activations."""
    with no_grad():
        return np.count_nonzero(adapter(acts).data, axis=-1)
