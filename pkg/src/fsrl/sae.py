"""Sparse autoencoder over hook activations.

Shapes follow the column-vector convention: ``W_enc`` is ``[d_sae, d]`` and
``W_dec`` is ``[d, d_sae]``; batched inputs are rows, so encoding a batch is
``X @ W_enc.T``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, backward, no_grad, ops, reset_tape
from .autodiff.tensor import ShapeError
from .data import TokenSequence, pad_batch
from .errors import DivergenceError
from .lm import FrozenLM
from .optim import Adam, cosine_lr
from .rng import stream


@dataclass(frozen=True)
class SAETrainConfig:
    alpha_sae: float = 0.02
    lr: float = 2e-3
    steps: int = 3000
    batch: int = 256
    seed: int = 0
    expansion: int = 8  # d_sae = expansion * d

    def validate(self) -> None:
        if self.alpha_sae < 0:
            raise ValueError(f"alpha_sae must be >= 0, got {self.alpha_sae}")
        for name in ("lr", "steps", "batch", "expansion"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.expansion < 2:
            raise ValueError("expansion must be >= 2 so that d_sae > d")


class SparseAutoencoder:
    PARAM_NAMES = ("W_enc", "b_enc", "W_dec", "b_dec")

    def __init__(self, W_enc, b_enc, W_dec, b_dec, *, trainable: bool = False):
        arrays = [np.array(getattr(a, "data", a), dtype=np.float64) for a in (W_enc, b_enc, W_dec, b_dec)]
        d_sae, d = arrays[0].shape
        expected = {"W_enc": (d_sae, d), "b_enc": (d_sae,), "W_dec": (d, d_sae), "b_dec": (d,)}
        for name, arr in zip(self.PARAM_NAMES, arrays):
            if arr.shape != expected[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")
        if d_sae <= d:
            raise ValueError(f"d_sae ({d_sae}) must exceed d ({d})")
        self.W_enc, self.b_enc, self.W_dec, self.b_dec = (
            Tensor(a, requires_grad=trainable, name=n) for a, n in zip(arrays, self.PARAM_NAMES)
        )
        if not trainable:
            self.freeze()

    @classmethod
    def random(cls, d: int, d_sae: int, rng: np.random.Generator, b_dec: np.ndarray | None = None, *, trainable=True):
        W_dec = rng.normal(size=(d, d_sae))
        W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
        return cls(W_dec.T.copy(), np.zeros(d_sae), W_dec, np.zeros(d) if b_dec is None else b_dec, trainable=trainable)

    @property
    def d(self) -> int:
        return self.W_dec.shape[0]

    @property
    def d_sae(self) -> int:
        return self.W_dec.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.W_enc, self.b_enc, self.W_dec, self.b_dec]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in zip(self.PARAM_NAMES, self.parameters())}

    def freeze(self) -> "SparseAutoencoder":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
            p.data.flags.writeable = False
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, a in self.named_arrays().items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def normalize_decoder(self) -> None:
        self.W_dec.data /= np.linalg.norm(self.W_dec.data, axis=0, keepdims=True)

    def encode(self, x) -> Tensor:
        return encode(self, x)

    def decode(self, f) -> Tensor:
        return decode(self, f)

    def decode_delta(self, v) -> Tensor:
        """Bias-free decoder W_dec·v, the steering form of the decoder."""
        return decode_delta(self, v)


def _check_last(x: Tensor, n: int, what: str) -> None:
    if x.ndim == 0 or x.shape[-1] != n:
        raise ShapeError(f"{what}: expected trailing dimension {n}, got shape {x.shape}")


def encode(sae: SparseAutoencoder, x) -> Tensor:
    """f = ReLU(W_enc x + b_enc), batched over leading axes."""
    x = as_tensor(x)
    _check_last(x, sae.d, "encode")
    return ops.relu(x @ ops.transpose(sae.W_enc) + sae.b_enc)


def decode(sae: SparseAutoencoder, f) -> Tensor:
    """x_hat = W_dec f + b_dec."""
    return decode_delta(sae, f) + sae.b_dec


def decode_delta(sae: SparseAutoencoder, v) -> Tensor:
    v = as_tensor(v)
    _check_last(v, sae.d_sae, "decode")
    return v @ ops.transpose(sae.W_dec)


def sae_loss(sae: SparseAutoencoder, x, alpha_sae: float) -> Tensor:
    """||x - x_hat||^2 + alpha * ||f||_1, averaged over any leading batch axes."""
    if alpha_sae < 0:
        raise ValueError(f"alpha_sae must be >= 0, got {alpha_sae}")
    x = as_tensor(x)
    f = encode(sae, x)
    err = x - decode(sae, f)
    per = ops.sum(err * err, axis=-1) + alpha_sae * ops.sum(ops.abs(f), axis=-1)
    return ops.mean(per) if per.ndim else per


def collect_activations(model: FrozenLM, seqs: Sequence[TokenSequence], batch_size: int = 256) -> np.ndarray:
    """Hook activations at every non-padding position, in corpus order."""
    out = []
    for i in range(0, len(seqs), batch_size):
        batch = pad_batch(seqs[i : i + batch_size])
        acts = model.hook_activations(batch.tokens)
        out.append(acts[batch.valid])
    return np.concatenate(out, axis=0)


def reconstruction_stats(sae: SparseAutoencoder, acts: np.ndarray) -> tuple[float, float]:
    """(mean squared-l2 reconstruction error, mean l0 of f) over ``acts``."""
    with no_grad():
        f = encode(sae, acts)
        err = acts - decode(sae, f).data
    return float((err * err).sum(axis=1).mean()), float((f.data > 0).sum(axis=1).mean())


@dataclass
class SAETrainResult:
    sae: SparseAutoencoder
    metrics: list[dict] = field(default_factory=list)  # step, loss, mse, l0
    initial_mse: float = 0.0
    final_mse: float = 0.0
    final_l0: float = 0.0


def train_sae(
    model: FrozenLM,
    corpus: Sequence[TokenSequence],
    cfg: SAETrainConfig,
    *,
    eval_every: int = 100,
    heldout_frac: float = 0.1,
) -> SAETrainResult:
    """Fit an SAE to shuffled hook activations; decoder columns are re-normalised every step."""
    cfg.validate()
    acts = collect_activations(model, corpus)
    rng = stream(cfg.seed, "sae")
    acts = acts[rng.permutation(len(acts))]
    n_held = max(1, int(len(acts) * heldout_frac))
    train, held = acts[:-n_held], acts[-n_held:]
    if len(train) < cfg.batch:
        raise ValueError(f"corpus yields {len(train)} training activations, fewer than batch {cfg.batch}")

    d = acts.shape[1]
    sae = SparseAutoencoder.random(d, cfg.expansion * d, rng, b_dec=train.mean(axis=0))
    initial_mse, initial_l0 = reconstruction_stats(sae, held)
    result = SAETrainResult(sae=sae, initial_mse=initial_mse)
    result.metrics.append({"step": 0, "loss": float("nan"), "mse": initial_mse, "l0": initial_l0})
    opt = Adam(sae.parameters(), lr=cfg.lr)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(train), size=cfg.batch)
        reset_tape()
        opt.zero_grad()
        loss = sae_loss(sae, train[idx], cfg.alpha_sae)
        if not np.isfinite(loss.item()):
            raise DivergenceError(step)
        backward(loss)
        opt.step(cosine_lr(step, cfg.steps, cfg.lr))
        sae.normalize_decoder()
        if (step + 1) % eval_every == 0 or step + 1 == cfg.steps:
            mse, l0 = reconstruction_stats(sae, held)
            result.metrics.append({"step": step + 1, "loss": loss.item(), "mse": mse, "l0": l0})
    reset_tape()
    result.final_mse, result.final_l0 = reconstruction_stats(sae, held)
    sae.freeze()
    return result
