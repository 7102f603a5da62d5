"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape


class KinkError(ValueError):
    """The sample point lies too close to a non-differentiable kink."""


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    n_coords: dict[str, int] = field(default_factory=dict)
    tol: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by zero."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-6,
    *,
    names: Sequence[str] | None = None,
    kink_margin: Callable[[], float] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f()`` against central differences.

    ``f`` closes over ``params`` and must return a scalar Tensor. When
    ``kink_margin`` is given it must return the smallest distance of any
    pre-activation to its kink; points closer than ``10*h`` raise KinkError so
    the caller can resample. ``max_coords`` subsamples coordinates per tensor.
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    if kink_margin is not None:
        margin = kink_margin()
        if margin < 10 * h:
            raise KinkError(f"sample within {margin:.3g} of a kink (need >= {10 * h:.3g})")
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]

    for p in params:
        p.grad = None
    reset_tape()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("f returned a non-finite value")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p, a in zip(names, params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                gen = rng if rng is not None else np.random.default_rng(0)
                coords = np.sort(gen.choice(flat.size, size=max_coords, replace=False))
            numeric = np.empty(coords.size)
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp = f().item()
                flat[c] = orig - h
                fm = f().item()
                flat[c] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ValueError(f"f non-finite while perturbing {name}[{c}]")
                numeric[j] = (fp - fm) / (2 * h)
            err = rel_error(a.reshape(-1)[coords], numeric, floor)
            report.max_rel_err[name] = float(err.max()) if err.size else 0.0
            report.n_coords[name] = int(coords.size)
    return report
