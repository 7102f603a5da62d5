"""Trainable steering adapter and the two ways of applying its output.

The adapter maps a hook activation ``x`` to ``z = W_a x + b_a`` and then to a
sparse steering vector ``v`` over SAE features:

* ``soft_threshold``: ``sign(z) * relu(|z| - theta)`` (amplify, suppress or leave alone)
* ``relu``: ``relu(z)`` (amplify only; theta unused)
* ``jump_relu``: ``z * H(|z| - theta)`` with a hard gate, thresholds trained by STE

``Decoder(v)`` for steering drops ``b_dec`` so that ``v = 0`` is an exact no-op.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .autodiff.tensor import ShapeError
from .sae import SparseAutoencoder, decode, decode_delta, encode

VARIANTS = ("soft_threshold", "relu", "jump_relu")


def soft_threshold(z, theta) -> Tensor:
    return ops.sign(z) * ops.relu(ops.abs(z) - theta)


class SteeringAdapter:
    PARAM_NAMES = ("W_a", "b_a", "theta")

    def __init__(
        self, W_a, b_a, theta, variant: str = "soft_threshold", *, trainable: bool = True, ste_eps: float = 1e-3
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown adapter variant {variant!r}; expected one of {VARIANTS}")
        arrays = [np.array(getattr(a, "data", a), dtype=np.float64) for a in (W_a, b_a, theta)]
        d_sae, d = arrays[0].shape
        if arrays[1].shape != (d_sae,) or arrays[2].shape != (d_sae,):
            raise ShapeError(f"b_a {arrays[1].shape} and theta {arrays[2].shape} must be ({d_sae},)")
        if (arrays[2] < 0).any():
            raise ValueError("theta must be non-negative")
        self.variant = variant
        self.ste_eps = ste_eps
        self.W_a, self.b_a, self.theta = (
            Tensor(a, requires_grad=trainable, name=n) for a, n in zip(arrays, self.PARAM_NAMES)
        )

    @classmethod
    def init(
        cls,
        d: int,
        d_sae: int,
        variant: str = "soft_threshold",
        rng: np.random.Generator | None = None,
        init_scale: float = 1e-6,
        theta_init: float = 1e-6,
    ) -> "SteeringAdapter":
        """Uniform(-init_scale, init_scale) weights, zero bias, constant thresholds."""
        rng = rng if rng is not None else np.random.default_rng(0)
        W_a = rng.uniform(-init_scale, init_scale, size=(d_sae, d))
        return cls(W_a, np.zeros(d_sae), np.full(d_sae, theta_init), variant)

    @property
    def d(self) -> int:
        return self.W_a.shape[1]

    @property
    def d_sae(self) -> int:
        return self.W_a.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.W_a, self.b_a, self.theta]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in zip(self.PARAM_NAMES, self.parameters())}

    def copy(self) -> "SteeringAdapter":
        arrays = (a.copy() for a in self.named_arrays().values())
        return SteeringAdapter(*arrays, variant=self.variant, ste_eps=self.ste_eps)

    def digest(self) -> str:
        h = hashlib.sha256(self.variant.encode())
        for n, a in self.named_arrays().items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def clamp_theta(self) -> None:
        np.maximum(self.theta.data, 0.0, out=self.theta.data)

    def preact(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 0 or x.shape[-1] != self.d:
            raise ShapeError(f"adapter expects trailing dimension {self.d}, got shape {x.shape}")
        return x @ ops.transpose(self.W_a) + self.b_a

    def activate(self, z) -> Tensor:
        if self.variant == "soft_threshold":
            return soft_threshold(z, self.theta)
        if self.variant == "relu":
            return ops.relu(z)
        return ops.straight_through_gate(z, self.theta, self.ste_eps)

    def __call__(self, x) -> Tensor:
        return self.activate(self.preact(x))


@dataclass(frozen=True)
class SteeringVector:
    v: np.ndarray

    @property
    def l0(self) -> int:
        return int(np.count_nonzero(self.v))


def adapter_forward(adapter: SteeringAdapter, x) -> SteeringVector:
    return SteeringVector(np.array(adapter(x).data))


def apply_steering_direct(sae: SparseAutoencoder, x, v) -> Tensor:
    """x + W_dec v."""
    x = as_tensor(x)
    delta = decode_delta(sae, getattr(v, "v", v))
    if delta.shape != x.shape:
        raise ShapeError(f"steering delta {delta.shape} does not match activation {x.shape}")
    return x + delta


def apply_steering_reconstruction(sae: SparseAutoencoder, x, v) -> Tensor:
    """Decoder(f + v) + (x - Decoder(f)) with f = encode(x).

    Evaluated as ``x + (Decoder(f + v) - Decoder(f))`` so that ``v = 0`` returns
    ``x`` bit-for-bit.
    """
    x = as_tensor(x)
    v = as_tensor(getattr(v, "v", v))
    f = encode(sae, x)
    if v.shape[-1] != f.shape[-1]:
        raise ShapeError(f"steering vector {v.shape} does not match features {f.shape}")
    return x + (decode(sae, f + v) - decode(sae, f))


def steering_l1(v) -> Tensor:
    """Sum of |v_i| over the feature axis."""
    return ops.sum(ops.abs(as_tensor(getattr(v, "v", v))), axis=-1)


def ste_l0_loss(adapter: SteeringAdapter, z, eps: float | None = None) -> Tensor:
    """Exact count of open gates per row; thresholds get the rectangle-STE gradient."""
    eps = adapter.ste_eps if eps is None else eps
    return ops.sum(ops.heaviside_ste(z, adapter.theta, eps), axis=-1)


KeepFn = Callable[[np.ndarray], np.ndarray]


class SteeringHook:
    """Intervention for ``FrozenLM.forward`` that steers the hook activations.

    ``keep`` optionally maps the steering values ``[B, T, d_sae]`` to a boolean
    mask of entries to retain (used for ablation and top-k). The last
    pre-activations and steering vectors are kept on the hook for penalties
    and analysis.
    """

    def __init__(
        self,
        sae: SparseAutoencoder,
        adapter: SteeringAdapter,
        mode: str = "reconstruction",
        keep: KeepFn | None = None,
    ):
        if mode not in ("reconstruction", "direct"):
            raise ValueError(f"unknown steering mode {mode!r}")
        self.sae = sae
        self.adapter = adapter
        self.mode = mode
        self.keep = keep
        self.last_z: Tensor | None = None
        self.last_v: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        z = self.adapter.preact(x)
        v = self.adapter.activate(z)
        if self.keep is not None:
            v = ops.where(self.keep(v.data), v, 0.0)
        self.last_z, self.last_v = z, v
        if self.mode == "direct":
            return apply_steering_direct(self.sae, x, v)
        return apply_steering_reconstruction(self.sae, x, v)
