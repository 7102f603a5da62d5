from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TINY_SPEC, tiny_model, tiny_sae
from fsrl.autodiff import KinkError, ShapeError, finite_diff_check
from fsrl.data import corpus_sequences, gen_corpus
from fsrl.sae import SAETrainConfig, SparseAutoencoder, decode, encode, sae_loss, train_sae


def _sae_2x3():
    W_enc = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    W_dec = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return SparseAutoencoder(W_enc, np.zeros(3), W_dec, np.array([0.5, -0.5]))


def test_encode_example():
    np.testing.assert_array_equal(encode(_sae_2x3(), [3.0, -1.0]).data, [3.0, 0.0, 0.0])
    np.testing.assert_array_equal(encode(_sae_2x3(), [0.0, 0.0]).data, [0.0, 0.0, 0.0])


def test_decode_of_zero_is_bias():
    np.testing.assert_array_equal(decode(_sae_2x3(), np.zeros(3)).data, [0.5, -0.5])


def test_encode_decode_match_matmul_oracle():
    rng = np.random.default_rng(0)
    sae = tiny_sae(1)
    sae.b_enc.data.flags.writeable = True
    sae.b_enc.data[:] = rng.normal(size=sae.d_sae)
    x = rng.normal(size=(20, sae.d))
    f = np.maximum(x @ sae.W_enc.data.T + sae.b_enc.data, 0.0)
    np.testing.assert_allclose(encode(sae, x).data, f, rtol=0, atol=1e-12)
    xh = f @ sae.W_dec.data.T + sae.b_dec.data
    np.testing.assert_allclose(decode(sae, f).data, xh, rtol=0, atol=1e-12)


def test_sae_loss_example():
    # x=(1,0); zero decoder so x_hat=0; f=(2,0,0) through the encoder bias
    sae = SparseAutoencoder(np.zeros((3, 2)), np.array([2.0, 0.0, -1.0]), np.zeros((2, 3)), np.zeros(2))
    assert sae_loss(sae, np.array([1.0, 0.0]), 0.1).item() == pytest.approx(1.2, abs=1e-15)
    perfect = SparseAutoencoder(np.zeros((3, 2)), np.full(3, -1.0), np.zeros((2, 3)), np.array([1.0, 0.0]))
    assert sae_loss(perfect, np.array([1.0, 0.0]), 0.1).item() == 0.0
    with pytest.raises(ValueError):
        sae_loss(perfect, np.zeros(2), -1.0)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        encode(_sae_2x3(), np.zeros(3))
    with pytest.raises(ShapeError):
        decode(_sae_2x3(), np.zeros(2))
    with pytest.raises(ValueError):
        SparseAutoencoder(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))


def test_sae_loss_gradients():
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 10:
        sae = SparseAutoencoder.random(4, 12, rng, b_dec=rng.normal(size=4), trainable=True)
        sae.b_enc.data[:] = rng.normal(scale=0.3, size=12)
        x = rng.normal(size=(6, 4))
        pre = x @ sae.W_enc.data.T + sae.b_enc.data
        try:
            rep = finite_diff_check(
                lambda: sae_loss(sae, x, 0.1), sae.parameters(), h=1e-5, tol=1e-5,
                names=list(SparseAutoencoder.PARAM_NAMES), kink_margin=lambda: float(np.abs(pre).min()),
            )
        except KinkError:
            continue
        assert rep.passed, rep.max_rel_err
        checked += 1


@settings(max_examples=50, deadline=None)
@given(
    x=arrays(np.float64, (5, 8), elements=st.floats(-10, 10)),
    f1=arrays(np.float64, 24, elements=st.floats(-5, 5)),
    f2=arrays(np.float64, 24, elements=st.floats(-5, 5)),
)
def test_features_non_negative_and_decoder_affine(x, f1, f2):
    sae = tiny_sae(2)
    assert (encode(sae, x).data >= 0).all()
    lhs = decode(sae, f1 + f2).data - decode(sae, f1).data - decode(sae, f2).data + sae.b_dec.data
    np.testing.assert_allclose(lhs, 0.0, atol=1e-12)


def _corpus():
    return corpus_sequences(gen_corpus(0, 200, TINY_SPEC))


def test_train_sae_reduces_mse_keeps_unit_decoder_and_is_deterministic():
    model = tiny_model(3)
    cfg = SAETrainConfig(alpha_sae=0.02, lr=5e-3, steps=150, batch=64, seed=1, expansion=4)
    a, b = train_sae(model, _corpus(), cfg), train_sae(model, _corpus(), cfg)
    assert a.final_mse < 0.5 * a.initial_mse
    norms = np.linalg.norm(a.sae.W_dec.data, axis=0)
    assert np.abs(norms - 1.0).max() <= 1e-9
    assert a.sae.digest() == b.sae.digest()
    assert [r["l0"] for r in a.metrics] == [r["l0"] for r in b.metrics]


def test_sae_sparsity_non_increasing_in_alpha():
    model = tiny_model(3)
    l0 = [
        train_sae(model, _corpus(), SAETrainConfig(alpha_sae=a, lr=5e-3, steps=150, batch=64, seed=1, expansion=4)).final_l0
        for a in (0.0, 0.1, 1.0)
    ]
    assert l0[0] >= l0[1] >= l0[2], l0


def test_train_sae_rejects_bad_config():
    with pytest.raises(ValueError):
        train_sae(tiny_model(), _corpus(), SAETrainConfig(steps=0))
    with pytest.raises(ValueError):
        train_sae(tiny_model(), _corpus()[:2], SAETrainConfig(batch=256))
