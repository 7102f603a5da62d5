"""Small pre-LN decoder-only transformer used as the frozen base model.

The hook point is the residual stream entering block ``hook_layer`` (before
that block's attention). An intervention is any callable mapping the hook
activations ``[B, T, d_model]`` to a replacement of the same shape; the rest
of the forward pass consumes the replacement.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import data as data_mod
from .autodiff import Tensor, backward, no_grad, ops, reset_tape
from .data import Batch, TokenSequence, pad_batch
from .errors import DivergenceError
from .optim import Adam, cosine_lr
from .rng import stream

Intervention = Callable[[Tensor], Tensor]

_MASK_VALUE = -1e9


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = data_mod.vocab_size()
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    d_mlp: int = 128
    context_len: int = 32
    hook_layer: int = 2

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_mlp", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.hook_layer < self.n_layers:
            raise ValueError(f"hook_layer {self.hook_layer} outside [0, {self.n_layers})")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def with_hook_layer(self, layer: int) -> "LMConfig":
        cfg = LMConfig(**{**asdict(self), "hook_layer": layer})
        cfg.validate()
        return cfg


def init_params(cfg: LMConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, V = cfg.d_model, cfg.vocab_size
    out_std = 1.0 / math.sqrt(d) / math.sqrt(2 * cfg.n_layers)
    p = {
        "embed.W_E": rng.normal(0, 0.5, (V, d)),
        "embed.W_pos": rng.normal(0, 0.1, (cfg.context_len, d)),
    }
    for i in range(cfg.n_layers):
        b = f"blocks.{i}."
        p[b + "ln1.w"] = np.ones(d)
        p[b + "ln1.b"] = np.zeros(d)
        for name in ("W_Q", "W_K", "W_V"):
            p[b + "attn." + name] = rng.normal(0, 1.0 / math.sqrt(d), (d, d))
        p[b + "attn.W_O"] = rng.normal(0, out_std, (d, d))
        p[b + "attn.b_O"] = np.zeros(d)
        p[b + "ln2.w"] = np.ones(d)
        p[b + "ln2.b"] = np.zeros(d)
        p[b + "mlp.W_in"] = rng.normal(0, 1.0 / math.sqrt(d), (d, cfg.d_mlp))
        p[b + "mlp.b_in"] = np.zeros(cfg.d_mlp)
        p[b + "mlp.W_out"] = rng.normal(0, out_std * math.sqrt(d / cfg.d_mlp), (cfg.d_mlp, d))
        p[b + "mlp.b_out"] = np.zeros(d)
    p["ln_f.w"] = np.ones(d)
    p["ln_f.b"] = np.zeros(d)
    p["unembed.W_U"] = rng.normal(0, 1.0 / math.sqrt(d), (d, V))
    p["unembed.b_U"] = np.zeros(V)
    return p


class FrozenLM:
    """Transformer parameters plus the forward pass with an optional hook intervention."""

    def __init__(self, config: LMConfig, params: dict[str, np.ndarray | Tensor], *, trainable: bool = False):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        for name, arr in params.items():
            data = arr.data if isinstance(arr, Tensor) else arr
            self.params[name] = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable, name=name)
        self.frozen = False
        if not trainable:
            self.freeze()

    @classmethod
    def random(cls, config: LMConfig, seed: int, *, trainable: bool = False) -> "FrozenLM":
        return cls(config, init_params(config, stream(seed, "lm.init")), trainable=trainable)

    def freeze(self) -> "FrozenLM":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def thawed_copy(self) -> "FrozenLM":
        return FrozenLM(self.config, {k: v.data.copy() for k, v in self.params.items()}, trainable=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    # -- forward ---------------------------------------------------------------------------

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ops.layernorm(x) * self.params[prefix + ".w"] + self.params[prefix + ".b"]

    def _attn(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        P = self.params
        B, T, d = x.shape
        H = cfg.n_heads
        dh = d // H
        b = f"blocks.{i}.attn."

        def heads(t: Tensor) -> Tensor:
            return ops.transpose(ops.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = heads(x @ P[b + "W_Q"])
        k = heads(x @ P[b + "W_K"])
        v = heads(x @ P[b + "W_V"])
        scores = (q @ ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        mask = np.triu(np.full((T, T), _MASK_VALUE), k=1)
        pattern = ops.softmax(scores + mask)
        z = ops.reshape(ops.transpose(pattern @ v, (0, 2, 1, 3)), (B, T, d))
        return z @ P[b + "W_O"] + P[b + "b_O"]

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        P = self.params
        b = f"blocks.{i}.mlp."
        return ops.gelu(x @ P[b + "W_in"] + P[b + "b_in"]) @ P[b + "W_out"] + P[b + "b_out"]

    def forward(self, tokens: np.ndarray, intervention: Intervention | None = None) -> tuple[Tensor, Tensor]:
        """Logits ``[B, T, V]`` and the (unmodified) hook activations ``[B, T, d]``."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, T = tokens.shape
        cfg = self.config
        if T > cfg.context_len:
            raise ValueError(f"sequence length {T} exceeds context_len {cfg.context_len}")
        x = self.params["embed.W_E"][tokens] + self.params["embed.W_pos"][:T]
        hook_acts = None
        for i in range(cfg.n_layers):
            if i == cfg.hook_layer:
                hook_acts = x
                if intervention is not None:
                    x = intervention(x)
                    if not isinstance(x, Tensor) or x.shape != hook_acts.shape:
                        got = getattr(x, "shape", type(x).__name__)
                        raise ValueError(f"intervention returned shape {got}, expected {hook_acts.shape}")
            x = x + self._attn(self._ln(x, f"blocks.{i}.ln1"), i)
            x = x + self._mlp(self._ln(x, f"blocks.{i}.ln2"), i)
        logits = self._ln(x, "ln_f") @ self.params["unembed.W_U"] + self.params["unembed.b_U"]
        return logits, hook_acts

    def hook_activations(self, tokens: np.ndarray) -> np.ndarray:
        """Residual stream at the hook point, computed only up to that layer."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        T = tokens.shape[1]
        with no_grad():
            x = self.params["embed.W_E"][tokens] + self.params["embed.W_pos"][:T]
            for i in range(self.config.hook_layer):
                x = x + self._attn(self._ln(x, f"blocks.{i}.ln1"), i)
                x = x + self._mlp(self._ln(x, f"blocks.{i}.ln2"), i)
        return x.data


def forward_with_hook(
    model: FrozenLM, seq: TokenSequence | np.ndarray, intervention: Intervention | None = None
) -> tuple[Tensor, Tensor]:
    """Single-sequence forward: logits ``[T, V]`` and hook activations ``[T, d]``."""
    tokens = seq.tokens if isinstance(seq, TokenSequence) else np.asarray(seq)
    logits, acts = model.forward(tokens[None, :], intervention)
    T = tokens.shape[0]
    return ops.reshape(logits, (T, logits.shape[-1])), ops.reshape(acts, (T, acts.shape[-1]))


def batch_avg_logprob(model: FrozenLM, batch: Batch, intervention: Intervention | None = None) -> Tensor:
    """Length-normalised response log-probability per sequence, shape ``[B]``."""
    if batch.response[:, 0].any():
        raise ValueError("response token at position 0 has no preceding context")
    counts = batch.response[:, 1:].sum(axis=1)
    if (counts == 0).any():
        raise ValueError("sequence without response tokens")
    logits, _ = model.forward(batch.tokens, intervention)
    return response_avg_logprob(logits, batch)


def response_avg_logprob(logits: Tensor, batch: Batch) -> Tensor:
    B, T = batch.tokens.shape
    logp = ops.log_softmax(ops.index(logits, (slice(None), slice(0, T - 1))))
    bi, ti = np.meshgrid(np.arange(B), np.arange(T - 1), indexing="ij")
    picked = ops.index(logp, (bi, ti, batch.tokens[:, 1:]))
    mask = batch.response[:, 1:].astype(np.float64)
    return ops.sum(picked * mask, axis=1) / mask.sum(axis=1)


def sequence_avg_logprob(model: FrozenLM, seq: TokenSequence, intervention: Intervention | None = None) -> Tensor:
    """(1/|y|) * sum of natural-log next-token probabilities over response tokens."""
    if seq.n_response == 0:
        raise ValueError("sequence has no response tokens")
    out = batch_avg_logprob(model, pad_batch([seq]), intervention)
    return ops.reshape(out, ())


def lm_loss(model: FrozenLM, batch: Batch) -> Tensor:
    """Mean next-token cross-entropy over every non-padding target."""
    B, T = batch.tokens.shape
    logits, _ = model.forward(batch.tokens)
    logp = ops.log_softmax(ops.index(logits, (slice(None), slice(0, T - 1))))
    bi, ti = np.meshgrid(np.arange(B), np.arange(T - 1), indexing="ij")
    picked = ops.index(logp, (bi, ti, batch.tokens[:, 1:]))
    mask = batch.valid[:, 1:].astype(np.float64)
    return -ops.sum(picked * mask) / mask.sum()


def eval_lm_loss(model: FrozenLM, seqs: Sequence[TokenSequence], batch_size: int = 256) -> float:
    total, count = 0.0, 0.0
    with no_grad():
        for i in range(0, len(seqs), batch_size):
            batch = pad_batch(seqs[i : i + batch_size])
            n = batch.valid[:, 1:].sum()
            total += lm_loss(model, batch).item() * n
            count += n
    return total / count


@dataclass
class PretrainResult:
    model: FrozenLM
    train_loss: list[float]
    initial_heldout: float
    final_heldout: float


def pretrain_lm(
    corpus: Sequence[TokenSequence],
    config: LMConfig,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    heldout_frac: float = 0.1,
) -> PretrainResult:
    """Train a fresh model on ``corpus`` with next-token cross-entropy, then freeze it."""
    if not corpus:
        raise ValueError("corpus is empty")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    config.validate()
    n_held = max(1, int(len(corpus) * heldout_frac))
    if len(corpus) <= n_held:
        raise ValueError("corpus too small to hold out a validation slice")
    train, held = list(corpus[:-n_held]), list(corpus[-n_held:])
    model = FrozenLM.random(config, seed, trainable=True)
    initial = eval_lm_loss(model, held)
    opt = Adam(model.parameters(), lr=lr)
    rng = stream(seed, "lm.batches")
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(train), size=batch_size)
        reset_tape()
        opt.zero_grad()
        loss = lm_loss(model, pad_batch([train[i] for i in idx]))
        if not np.isfinite(loss.item()):
            raise DivergenceError(step)
        backward(loss)
        opt.step(cosine_lr(step, steps, lr))
        losses.append(loss.item())
    reset_tape()
    final = eval_lm_loss(model, held)
    model.freeze()
    return PretrainResult(model, losses, initial, final)
