"""Tensor/tape semantics and per-primitive gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailnas.autodiff import Tensor, backward, functional as F, grad_check, no_grad
from tailnas.autodiff import tensor as tape_mod
from tailnas.errors import ShapeError, UnknownPrimitiveError


def test_square_sum_gradient():
    x = Tensor([3.0], requires_grad=True)
    backward(F.sum_(F.mul(x, x)))
    assert np.allclose(x.grad, [6.0])


def test_relu_subgradient_zero_at_negative():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    backward(F.sum_(F.relu(x)))
    assert (x.grad == [0.0, 1.0]).all()


def test_matmul_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))
    assert F.matmul(a, b).shape == (2, 4)
    with pytest.raises(ShapeError):
        F.matmul(a, Tensor(np.ones((2, 4))))


def test_conv2d_same_padding_shape():
    x = Tensor(np.zeros((1, 4, 8, 8)))
    w = Tensor(np.zeros((4, 4, 3, 3)))
    assert F.conv2d(x, w, stride=1, padding=1).shape == (1, 4, 8, 8)


def test_conv2d_group_divisibility():
    x = Tensor(np.zeros((1, 8, 8, 8)))
    w_ok = Tensor(np.zeros((8, 2, 3, 3)))
    assert F.conv2d(x, w_ok, padding=1, groups=4).shape == (1, 8, 8, 8)
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(np.zeros((6, 2, 3, 3))), padding=1, groups=3)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = F.relu(x)
    with pytest.raises(ShapeError):
        backward(y)


def test_backward_clears_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(F.sum_(F.mul(x, x)))
    assert len(tape_mod.active_tape()) == 0
    with pytest.raises(RuntimeError):
        backward(F.sum_(Tensor(np.ones(1))))  # nothing recorded


def test_grad_accumulates_across_uses():
    x = Tensor([2.0], requires_grad=True)
    y = F.add(F.mul(x, x), F.mul(x, x))
    backward(F.sum_(y))
    assert np.allclose(x.grad, [8.0])


def test_no_grad_suppresses_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        F.sum_(F.mul(x, x))
    assert len(tape_mod.active_tape()) == 0


def test_softmax_normalized_and_nonnegative():
    rng = np.random.default_rng(0)
    y = F.softmax(Tensor(rng.normal(size=(5, 9)) * 10), axis=1).data
    assert (y >= 0).all()
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_softmax_normalized_property(seed):
    rng = np.random.default_rng(seed)
    y = F.softmax(Tensor(rng.normal(size=(3, 7)) * rng.uniform(0.1, 30)), axis=1).data
    assert (y >= 0).all() and np.abs(y.sum(axis=1) - 1.0).max() < 1e-12


def test_batchnorm_normalizes_batch():
    # input variance large enough that the 1e-5 eps bias stays below tolerance
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(2.0, 10.0, size=(8, 4, 6, 6)))
    gamma, beta = Tensor(np.ones(4)), Tensor(np.zeros(4))
    y = F.batchnorm(x, gamma, beta).data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(y.var(axis=(0, 2, 3)) - 1.0).max() < 1e-6


def test_batchnorm_running_stats_drive_eval():
    rng = np.random.default_rng(2)
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    x = Tensor(rng.normal(1.0, 2.0, size=(16, 3, 5, 5)))
    for _ in range(60):
        F.batchnorm(x, gamma, beta, rm, rv, training=True)
    y = F.batchnorm(x, gamma, beta, rm, rv, training=False).data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 0.05


def test_concat_split_roundtrip_bit_exact():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 7, 4, 4)))
    parts = F.split(x, [3, 2, 2], axis=1)
    back = F.concat(list(parts), axis=1)
    assert (back.data == x.data).all()


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_concat_split_roundtrip_property(sizes, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, sum(sizes), 3, 3)))
    assert (F.concat(list(F.split(x, sizes, axis=1)), axis=1).data == x.data).all()


def test_deterministic_gradients_across_runs():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        g = Tensor(np.ones(4), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        y = F.batchnorm(F.conv2d(x, w, 1, 1), g, b)
        backward(F.sum_(F.relu(y)))
        return w.grad.copy(), g.grad.copy()

    g1, g2 = run(), run()
    assert (g1[0] == g2[0]).all() and (g1[1] == g2[1]).all()


def test_grad_check_linear_is_exact():
    a = Tensor(np.arange(6, dtype=float).reshape(2, 3))
    err = grad_check(lambda x: F.sum_(F.mul(x, a)), Tensor(np.ones((2, 3))), eps=1e-5)
    assert err < 1e-9


def test_grad_check_bn_relu_conv_chain():
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    g = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    x0 = Tensor(rng.normal(size=(2, 2, 5, 5)))
    err = grad_check(lambda x: F.sum_(F.relu(F.batchnorm(F.conv2d(x, w, 1, 1), g, b))), x0, eps=1e-5)
    assert err < 1e-4


def test_grad_check_flags_nondeterministic_fn():
    state = {"n": 0}

    def noisy(x):
        state["n"] += 1
        return F.sum_(F.scalar_mul(x, 1.0 + 0.001 * state["n"]))

    err = grad_check(noisy, Tensor(np.ones(3)), eps=1e-5)
    assert err == float("inf")


def test_grad_check_rejects_nonscalar():
    with pytest.raises(ShapeError):
        grad_check(lambda x: F.relu(x), Tensor(np.ones(3)), eps=1e-5)


def test_apply_primitive_dispatch_and_unknown():
    y = F.apply_primitive("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))])
    assert y.shape == (2, 2)
    parts = F.apply_primitive("split", [Tensor(np.ones((1, 4, 2, 2)))], {"sizes": [2, 2], "axis": 1})
    assert len(parts) == 2
    with pytest.raises(UnknownPrimitiveError):
        F.apply_primitive("convolve9000", [Tensor(np.ones(1))])


def test_add_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_avg_pool_ignores_padding_in_divisor():
    x = Tensor(np.ones((1, 1, 4, 4)))
    y = F.avg_pool2d(x, kernel=3, stride=1, padding=1).data
    assert np.allclose(y[0, 0, 1, 1], 1.0)  # interior: 9/9
    assert np.allclose(y[0, 0, 0, 0], 1.0)  # corner: 4/4, not 4/9


def test_weighted_sum_matches_manual():
    rng = np.random.default_rng(5)
    xs = [Tensor(rng.normal(size=(2, 3))) for _ in range(4)]
    w = Tensor(rng.normal(size=(4,)), requires_grad=True)
    y = F.weighted_sum(xs, w)
    manual = sum(wv * x.data for wv, x in zip(w.data, xs))
    assert np.allclose(y.data, manual)
