from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import TINY, TINY_SPEC, tiny_model
from fsrl.autodiff import Tensor, backward, ops, reset_tape
from fsrl.data import TokenSequence, corpus_sequences, gen_corpus, pad_batch, vocab_size
from fsrl.lm import (
    FrozenLM,
    LMConfig,
    eval_lm_loss,
    forward_with_hook,
    pretrain_lm,
    response_avg_logprob,
    sequence_avg_logprob,
)

SEQ = TokenSequence.from_text("abc=", "[abc].")


def test_identity_intervention_is_bit_exact(model):
    base, _ = forward_with_hook(model, SEQ)
    same, _ = forward_with_hook(model, SEQ, lambda x: x)
    zero, _ = forward_with_hook(model, SEQ, lambda x: x + np.zeros(TINY.d_model))
    np.testing.assert_array_equal(base.data, same.data)
    np.testing.assert_array_equal(base.data, zero.data)


def test_large_shift_changes_logits(model):
    base, acts = forward_with_hook(model, SEQ)
    # a uniform shift c*1 is invisible to layernorm, so shift along a random direction
    shift = 5.0 * np.random.default_rng(0).normal(size=TINY.d_model)
    moved, acts2 = forward_with_hook(model, SEQ, lambda x: x + shift)
    assert np.abs(base.data - moved.data).max() > 1e-3
    np.testing.assert_array_equal(acts.data, acts2.data)  # hook output is the pre-intervention stream
    assert acts.shape == (len(SEQ), TINY.d_model)


def test_intervention_shape_mismatch(model):
    with pytest.raises(ValueError, match="shape"):
        forward_with_hook(model, SEQ, lambda x: ops.index(x, (slice(None), slice(None), slice(0, 2))))


def test_hook_activations_match_forward(model):
    _, acts = model.forward(SEQ.tokens[None])
    np.testing.assert_array_equal(model.hook_activations(SEQ.tokens[None]), acts.data)


def test_uniform_logits_give_minus_log_vocab():
    logits = Tensor(np.zeros((1, 5, 8)))
    seq = TokenSequence(np.array([1, 2, 3, 4, 5]), np.array([False, True, True, True, True]))
    val = response_avg_logprob(logits, pad_batch([seq])).item()
    assert val == pytest.approx(-math.log(8), abs=1e-15)


def test_uniform_model_scores_every_length_the_same():
    params = {k: v.data.copy() for k, v in tiny_model().params.items()}
    params["unembed.W_U"][:] = 0.0
    params["unembed.b_U"][:] = 0.0
    m = FrozenLM(TINY, params)
    for resp in ("[a].", "[abcab].", "[abcabcab]."):
        val = sequence_avg_logprob(m, TokenSequence.from_text("ab=", resp)).item()
        assert val == pytest.approx(-math.log(vocab_size()), abs=1e-12)


def test_avg_logprob_matches_brute_force_softmax(model):
    logits, _ = forward_with_hook(model, SEQ)
    L = logits.data
    total, n = 0.0, 0
    for t in range(1, len(SEQ)):
        if not SEQ.response[t]:
            continue
        row = [float(v) for v in L[t - 1]]
        z = sum(math.exp(v) for v in row)
        total += math.log(math.exp(row[SEQ.tokens[t]]) / z)
        n += 1
    assert sequence_avg_logprob(model, SEQ).item() == pytest.approx(total / n, abs=1e-10)


def test_avg_logprob_requires_response_tokens(model):
    with pytest.raises(ValueError):
        sequence_avg_logprob(model, TokenSequence.from_text("abc", ""))


def test_context_length_enforced(model):
    with pytest.raises(ValueError, match="context_len"):
        model.forward(np.ones((1, TINY.context_len + 1), dtype=int))


def test_frozen_model_receives_no_gradient(model):
    shift = Tensor(np.zeros(TINY.d_model), requires_grad=True)
    reset_tape()
    backward(sequence_avg_logprob(model, SEQ, lambda x: x + shift))
    assert shift.grad is not None and np.abs(shift.grad).max() > 0
    assert all(p.grad is None for p in model.parameters())
    with pytest.raises(ValueError):
        model.params["embed.W_E"].data[0, 0] = 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        LMConfig(d_model=10, n_heads=3).validate()
    with pytest.raises(ValueError):
        LMConfig(hook_layer=4, n_layers=4).validate()


def test_pretrain_reduces_loss_and_is_deterministic():
    seqs = corpus_sequences(gen_corpus(0, 300, TINY_SPEC))
    a = pretrain_lm(seqs, TINY, steps=60, lr=1e-2, seed=3)
    b = pretrain_lm(seqs, TINY, steps=60, lr=1e-2, seed=3)
    assert a.final_heldout < a.initial_heldout
    assert a.final_heldout < math.log(vocab_size())
    assert a.model.digest() == b.model.digest()
    assert a.model.frozen
    assert eval_lm_loss(a.model, seqs[-30:]) == pytest.approx(a.final_heldout)


def test_pretrain_rejects_zero_steps():
    with pytest.raises(ValueError):
        pretrain_lm(corpus_sequences(gen_corpus(0, 20)), TINY, steps=0, lr=1e-3, seed=0)
