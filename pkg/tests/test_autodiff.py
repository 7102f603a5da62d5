from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fsrl.autodiff import (
    KinkError,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    current_tape,
    finite_diff_check,
    no_grad,
    ops,
    reset_tape,
)

H, TOL, TRIALS = 1e-5, 1e-6, 100
# Central differences at h=1e-5 carry ~1e-10 absolute round-off, so relative
# error is taken against max(|analytic|, |numeric|, 1e-3).
FLOOR = 1e-3


def _leaf(rng, shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 2.0, size=shape)
    return Tensor(data, requires_grad=True)


# name -> (input shapes, forward, positive inputs, kinked at 0)
PRIMITIVES = {
    "add": ([(3, 4), (4,)], lambda a, b: ops.add(a, b), False, False),
    "sub": ([(3, 4), (3, 1)], lambda a, b: ops.sub(a, b), False, False),
    "mul": ([(3, 4), (3, 4)], lambda a, b: ops.mul(a, b), False, False),
    "div": ([(3, 4), (3, 4)], lambda a, b: ops.div(a, b), True, False),
    "neg": ([(5,)], lambda a: ops.neg(a), False, False),
    "power": ([(5,)], lambda a: ops.power(a, 2.5), True, False),
    "matmul": ([(3, 4), (4, 2)], lambda a, b: ops.matmul(a, b), False, False),
    "batched_matmul": ([(2, 3, 4), (2, 4, 5)], lambda a, b: ops.matmul(a, b), False, False),
    "matvec": ([(3, 4), (4,)], lambda a, b: ops.matmul(a, b), False, False),
    "relu": ([(6,)], lambda a: ops.relu(a), False, True),
    "abs": ([(6,)], lambda a: ops.abs(a), False, True),
    "exp": ([(5,)], lambda a: ops.exp(a), False, False),
    "log": ([(5,)], lambda a: ops.log(a), True, False),
    "sigmoid": ([(5,)], lambda a: ops.sigmoid(a), False, False),
    "log_sigmoid": ([(5,)], lambda a: ops.log_sigmoid(a), False, False),
    "tanh": ([(5,)], lambda a: ops.tanh(a), False, False),
    "gelu": ([(5,)], lambda a: ops.gelu(a), False, False),
    "sum": ([(3, 4)], lambda a: ops.sum(a, axis=1), False, False),
    "mean": ([(3, 4)], lambda a: ops.mean(a, axis=0, keepdims=True), False, False),
    "softmax": ([(3, 5)], lambda a: ops.softmax(a), False, False),
    "log_softmax": ([(3, 5)], lambda a: ops.log_softmax(a), False, False),
    "layernorm": ([(3, 6)], lambda a: ops.layernorm(a), False, False),
    "index": ([(5, 3)], lambda a: ops.index(a, (np.array([0, 2, 2, 4]), slice(None))), False, False),
    "reshape": ([(3, 4)], lambda a: ops.reshape(a, (2, 6)), False, False),
    "transpose": ([(2, 3, 4)], lambda a: ops.transpose(a, (1, 2, 0)), False, False),
    "concatenate": ([(2, 3), (4, 3)], lambda a, b: ops.concatenate([a, b], axis=0), False, False),
    "where": ([(4,), (4,)], lambda a, b: ops.where(np.array([True, False, True, False]), a, b), False, False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    shapes, fwd, positive, kinked = PRIMITIVES[name]
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    worst = 0.0
    done = 0
    while done < TRIALS:
        params = [_leaf(rng, s, 0.5 if positive else None) for s in shapes]
        with no_grad():
            w = rng.normal(size=fwd(*params).shape)

        def f():
            return ops.sum(ops.mul(fwd(*params), w))

        margin = (lambda: float(np.abs(params[0].data).min())) if kinked else None
        try:
            rep = finite_diff_check(f, params, h=H, tol=TOL, kink_margin=margin, floor=FLOOR)
        except KinkError:
            continue
        worst = max(worst, rep.worst)
        done += 1
    assert worst <= TOL, f"{name}: max relative error {worst:.3e}"


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5


def test_gradient_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    reset_tape()
    backward(ops.sum(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=0, atol=1e-12)


def test_linear_map_gradient_replicates_input_per_row():
    rng = np.random.default_rng(0)
    W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = rng.normal(size=4)
    reset_tape()
    backward(ops.sum(W @ x))
    np.testing.assert_array_equal(W.grad, np.tile(x, (3, 1)))


def test_sigmoid_at_zero_gives_quarter_input():
    x = np.array([0.3, -1.2, 2.0])
    w = Tensor(np.zeros(3), requires_grad=True)
    reset_tape()
    backward(ops.sigmoid(ops.sum(w * x)))
    np.testing.assert_allclose(w.grad, 0.25 * x, rtol=0, atol=1e-15)


def test_constant_loss_gives_zero_grads():
    x = Tensor([1.0, -3.0], requires_grad=True)
    reset_tape()
    backward(ops.sum(x * 0.0) + 4.0)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_square_example_checker():
    x = Tensor(3.0, requires_grad=True)
    rep = finite_diff_check(lambda: x * x, [x], h=1e-5, tol=1e-6)
    assert rep.passed
    assert rep.worst <= 1e-6


def test_checker_rejects_point_near_kink():
    x = Tensor([5e-6, 1.0], requires_grad=True)
    with pytest.raises(KinkError):
        finite_diff_check(lambda: ops.sum(ops.relu(x)), [x], h=1e-6, kink_margin=lambda: float(np.abs(x.data).min()))


def test_checker_rejects_non_finite_and_bad_step():
    x = Tensor([-1.0], requires_grad=True)
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        finite_diff_check(lambda: ops.sum(ops.log(x)), [x])
    with pytest.raises(ValueError):
        finite_diff_check(lambda: ops.sum(x), [x], h=0.0)


def test_second_backward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    reset_tape()
    loss = ops.sum(x * x)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)
    backward(ops.sum(x * x))  # the next forward pass records onto a fresh tape
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])  # leaf grads accumulate across tapes


def test_backward_rejects_non_scalar_and_detached():
    reset_tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        backward(x * 2.0)
    with pytest.raises(TapeError):
        backward(Tensor(1.0))


def test_shape_errors_report_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_no_grad_records_nothing():
    reset_tape()
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert len(current_tape()) == 0


def test_tape_is_in_execution_order():
    reset_tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    ops.sum(ops.exp(ops.relu(x)))
    assert [n.op for n in current_tape().nodes] == ["relu", "exp", "sum"]


def test_straight_through_gate_forward_and_backward():
    z = Tensor([0.8, -1.5, 1.0, 1.0002], requires_grad=True)
    theta = Tensor([1.0, 1.0, 1.0, 1.0], requires_grad=True)
    reset_tape()
    out = ops.straight_through_gate(z, theta, eps=1e-3)
    np.testing.assert_array_equal(out.data, [0.0, -1.5, 0.0, 1.0002])
    backward(ops.sum(out))
    np.testing.assert_array_equal(z.grad, [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(theta.grad, [0.0, 0.0, -1.0 / 1e-3, -1.0002 / 1e-3])


@settings(max_examples=50, deadline=None)
@given(
    a=arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    b=arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
)
def test_backward_is_linear_in_the_loss(a, b):
    x = Tensor(a, requires_grad=True)

    def grad_of(fn):
        x.grad = None
        reset_tape()
        backward(fn())
        return x.grad.copy()

    g1 = grad_of(lambda: ops.sum(ops.tanh(x) * b))
    g2 = grad_of(lambda: ops.sum(ops.mul(x, x)))
    g12 = grad_of(lambda: ops.sum(ops.tanh(x) * b) + ops.sum(ops.mul(x, x)))
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_forward_is_bit_deterministic(seed):
    def run():
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(4, 6)))
        W = Tensor(rng.normal(size=(6, 3)))
        return ops.log_softmax(ops.layernorm(ops.gelu(x) @ W)).data

    np.testing.assert_array_equal(run(), run())


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_log_softmax_agrees(x):
    s = ops.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.exp(ops.log_softmax(Tensor(x)).data), s, rtol=1e-10, atol=1e-15)
