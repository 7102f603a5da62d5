from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_adapter, tiny_sae
from fsrl.adapter import (
    SteeringAdapter,
    SteeringHook,
    adapter_forward,
    apply_steering_direct,
    apply_steering_reconstruction,
    ste_l0_loss,
    steering_l1,
)
from fsrl.autodiff import ShapeError, Tensor, backward, reset_tape
from fsrl.sae import SparseAutoencoder


def _identity_adapter(theta, variant):
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    return SteeringAdapter(np.eye(n), np.zeros(n), theta, variant)


def _v(z, theta, variant):
    return adapter_forward(_identity_adapter(theta, variant), np.asarray(z, dtype=float)).v


def test_soft_threshold_examples():
    np.testing.assert_array_equal(_v([2.5, 0.5, -2.0], [1.0, 1.0, 0.5], "soft_threshold"), [1.5, 0.0, -1.5])


def test_relu_example_ignores_theta():
    np.testing.assert_array_equal(_v([-1.0, 2.0], [5.0, 5.0], "relu"), [0.0, 2.0])


def test_jump_relu_examples():
    np.testing.assert_array_equal(_v([0.8, -1.5, 1.0], [1.0, 1.0, 1.0], "jump_relu"), [0.0, -1.5, 0.0])


def test_steering_vector_l0_is_exact_count():
    sv = adapter_forward(_identity_adapter([1.0, 1.0, 0.0], "soft_threshold"), np.array([2.0, 0.3, 0.0]))
    assert sv.l0 == 1


def test_init_defaults():
    a = SteeringAdapter.init(8, 24, rng=np.random.default_rng(0))
    assert np.abs(a.W_a.data).max() <= 1e-6
    assert (a.theta.data == 1e-6).all()
    assert (a.b_a.data == 0).all()


def test_validation():
    with pytest.raises(ValueError):
        SteeringAdapter(np.eye(2), np.zeros(2), np.array([-1.0, 0.0]))
    with pytest.raises(ValueError):
        SteeringAdapter(np.eye(2), np.zeros(2), np.zeros(2), "tanh")
    with pytest.raises(ShapeError):
        tiny_adapter()(np.zeros(3))


def test_direct_steering_examples():
    sae = tiny_sae()
    x = np.random.default_rng(0).normal(size=sae.d)
    np.testing.assert_array_equal(apply_steering_direct(sae, x, np.zeros(sae.d_sae)).data, x)
    e = np.zeros(sae.d_sae)
    e[3] = 2.5
    np.testing.assert_allclose(apply_steering_direct(sae, x, e).data, x + 2.5 * sae.W_dec.data[:, 3], atol=1e-15)


def test_reconstruction_form_zero_steering_is_exact_noop():
    sae = tiny_sae()
    x = np.random.default_rng(1).normal(size=(5, sae.d))
    np.testing.assert_array_equal(apply_steering_reconstruction(sae, x, np.zeros((5, sae.d_sae))).data, x)


def test_reconstruction_form_with_dead_encoder():
    sae = tiny_sae()
    dead = SparseAutoencoder(sae.W_enc.data, np.full(sae.d_sae, -1e3), sae.W_dec.data, sae.b_dec.data)
    x = np.random.default_rng(2).normal(size=sae.d)
    v = np.random.default_rng(3).normal(size=sae.d_sae)
    expected = x + (v @ sae.W_dec.data.T + sae.b_dec.data) - sae.b_dec.data
    np.testing.assert_allclose(apply_steering_reconstruction(dead, x, v).data, expected, atol=1e-12)


def test_direct_and_reconstruction_agree_on_1000_random_cases():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(2, 10))
        sae = SparseAutoencoder.random(d, int(rng.integers(d + 1, 4 * d)), rng, b_dec=rng.normal(size=d))
        x = rng.normal(size=d)
        v = rng.normal(size=sae.d_sae) * (rng.random(sae.d_sae) < 0.3)
        a = apply_steering_direct(sae, x, v).data
        b = apply_steering_reconstruction(sae, x, v).data
        worst = max(worst, float(np.abs(a - b).max()))
    assert worst <= 1e-10


def test_steering_l1_examples():
    assert steering_l1(np.array([1.0, -2.0, 0.0])).item() == 3.0
    assert steering_l1(np.zeros(4)).item() == 0.0
    v = np.random.default_rng(0).normal(size=(3, 7))
    np.testing.assert_array_equal(steering_l1(v).data, np.abs(v).sum(axis=-1))


def test_ste_l0_forward_and_kernel():
    a = _identity_adapter([1.0, 1.0], "jump_relu")
    reset_tape()
    out = ste_l0_loss(a, Tensor(np.array([2.0, 0.1])), eps=1e-3)
    assert out.item() == 1.0
    backward(out)
    np.testing.assert_array_equal(a.theta.grad, [0.0, 0.0])  # both gaps exceed eps


def test_ste_kernel_integrates_to_minus_one():
    z = 1.0
    eps = 1e-3
    grid = np.linspace(z - 5 * eps, z + 5 * eps, 2001)
    step = grid[1] - grid[0]
    a = SteeringAdapter(np.ones((grid.size, 1)), np.zeros(grid.size), grid, "jump_relu")
    reset_tape()
    backward(ste_l0_loss(a, Tensor(np.full(grid.size, z)), eps))
    assert a.theta.grad.sum() * step == pytest.approx(-1.0, rel=0.02)


def test_hook_keep_mask_zeroes_entries():
    sae, adapter = tiny_sae(), tiny_adapter()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 4, sae.d)))
    hook = SteeringHook(sae, adapter, keep=lambda v: np.zeros(v.shape, dtype=bool))
    np.testing.assert_array_equal(hook(x).data, x.data)
    assert not hook.last_v.data.any()
    with pytest.raises(ValueError):
        SteeringHook(sae, adapter, mode="sideways")


def test_copy_and_digest():
    a = tiny_adapter(variant="jump_relu")
    b = a.copy()
    assert a.digest() == b.digest()
    b.W_a.data[0, 0] += 1.0
    assert a.digest() != b.digest()
    assert b.variant == "jump_relu" and b.ste_eps == a.ste_eps


@settings(max_examples=100, deadline=None)
@given(
    z=arrays(np.float64, 6, elements=st.floats(-5, 5)),
    theta=arrays(np.float64, 6, elements=st.floats(0, 3)),
)
def test_dead_zone_shrinkage_and_sign(z, theta):
    st_v = _v(z, theta, "soft_threshold")
    jr_v = _v(z, theta, "jump_relu")
    re_v = _v(z, theta, "relu")
    dead = np.abs(z) <= theta
    assert (st_v[dead] == 0).all() and (jr_v[dead] == 0).all()
    np.testing.assert_allclose(np.abs(st_v), np.maximum(np.abs(z) - theta, 0.0), atol=1e-12)
    live = st_v != 0
    assert (np.sign(st_v[live]) == np.sign(z[live])).all()
    np.testing.assert_array_equal(jr_v[~dead], z[~dead])
    assert (re_v >= 0).all()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_direct_equals_reconstruction_property(seed):
    rng = np.random.default_rng(seed)
    sae = SparseAutoencoder.random(6, 20, rng, b_dec=rng.normal(size=6) * 3)
    x = rng.normal(size=(3, 6)) * 4
    v = rng.normal(size=(3, 20))
    np.testing.assert_allclose(
        apply_steering_direct(sae, x, v).data, apply_steering_reconstruction(sae, x, v).data, rtol=0, atol=1e-10
    )
