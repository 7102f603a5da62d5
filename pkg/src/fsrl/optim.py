"""Adam with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor


def cosine_lr(step: int, total: int, base_lr: float, warmup_ratio: float = 0.1) -> float:
    """Linear warmup over ``warmup_ratio * total`` steps, then cosine decay to 0."""
    warmup = int(math.ceil(warmup_ratio * total))
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class Adam:
    """AdamW over a list of Tensors; ``lr_scale`` gives per-group multipliers."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        lr_scale: Sequence[float] | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = list(lr_scale) if lr_scale is not None else [1.0] * len(self.params)
        if len(self.lr_scale) != len(self.params):
            raise ValueError("lr_scale must match params")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v, scale in zip(self.params, self.m, self.v, self.lr_scale):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            step_lr = lr * scale
            if self.weight_decay:
                p.data -= step_lr * self.weight_decay * p.data
            p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
