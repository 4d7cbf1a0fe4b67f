"""Reverse-mode engine: every op's analytic gradient against central
differences, plus graph-level behaviors (accumulation, reuse, detachment)."""

import numpy as np
import pytest

from atmoe import autograd as ag
from atmoe.numerics import finite_diff_grad, seeded_rng

ATOL = 1e-7


def numeric_grad(build, theta0):
    """Central-difference gradient of scalar-valued build(theta)."""
    return finite_diff_grad(lambda t: build(t), theta0, h=1e-5)


def check_op(build_scalar, theta0):
    """build_scalar maps a flat parameter vector to a scalar ag.Tensor."""
    t = ag.Tensor(theta0.copy(), requires_grad=True)
    out = build_scalar(t)
    out.backward()
    num = numeric_grad(lambda th: float(build_scalar(ag.Tensor(th)).data), theta0)
    np.testing.assert_allclose(t.grad, num, atol=ATOL)


def test_add_mul_sub_grads():
    rng = seeded_rng(1)
    x0 = rng.normal(size=6)
    c = rng.normal(size=6)

    def f(t):
        y = ag.add(ag.mul(t, t), ag.mul(t, ag.Tensor(c)))
        y = ag.add(y, ag.mul(ag.Tensor(np.full(6, 2.0)), t))
        return ag.reduce_sum(y, 0)

    check_op(f, x0)


def test_matmul_grad_both_sides():
    rng = seeded_rng(2)
    a0 = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))

    def fa(t):
        prod = ag.matmul(t, ag.Tensor(b))
        return ag.reduce_sum(ag.reduce_sum(ag.mul(prod, prod), 1), 0)

    flat = a0.ravel()
    t = ag.Tensor(a0, requires_grad=True)
    out = ag.reduce_sum(ag.reduce_sum(ag.mul(ag.matmul(t, ag.Tensor(b)),
                                             ag.matmul(t, ag.Tensor(b))), 1), 0)
    out.backward()
    num = numeric_grad(
        lambda th: float(fa(ag.Tensor(th.reshape(3, 4))).data), flat)
    np.testing.assert_allclose(t.grad.ravel(), num, atol=ATOL)


def test_transpose_reshape_getitem_grads():
    rng = seeded_rng(3)
    x0 = rng.normal(size=(2, 3, 4))

    def f(t):
        y = ag.transpose(t, (1, 0, 2))
        y = ag.reshape(y, (3, 8))
        y = ag.getitem(y, (slice(0, 2), slice(1, 7)))
        return ag.reduce_sum(ag.reduce_sum(ag.mul(y, y), 1), 0)

    t = ag.Tensor(x0, requires_grad=True)
    f(t).backward()
    num = numeric_grad(lambda th: float(f(ag.Tensor(th.reshape(2, 3, 4))).data),
                       x0.ravel())
    np.testing.assert_allclose(t.grad.ravel(), num, atol=ATOL)


def test_embedding_grad_scatters_rows():
    rng = seeded_rng(4)
    table0 = rng.normal(size=(5, 3))
    ids = np.array([[1, 1, 4], [0, 2, 1]])

    def f(t):
        e = ag.embedding(t, ids)
        return ag.reduce_sum(ag.reduce_sum(ag.reduce_sum(ag.mul(e, e), 2), 1), 0)

    t = ag.Tensor(table0, requires_grad=True)
    f(t).backward()
    num = numeric_grad(lambda th: float(f(ag.Tensor(th.reshape(5, 3))).data),
                       table0.ravel())
    np.testing.assert_allclose(t.grad.ravel(), num, atol=ATOL)
    # row 3 is never looked up, so its gradient must be exactly zero
    np.testing.assert_array_equal(t.grad[3], np.zeros(3))


def test_log_gelu_layer_norm_grads():
    rng = seeded_rng(5)
    x0 = np.abs(rng.normal(size=(2, 6))) + 0.5

    def f_log(t):
        return ag.reduce_sum(ag.reduce_sum(ag.log(t), 1), 0)

    t = ag.Tensor(x0, requires_grad=True)
    f_log(t).backward()
    num = numeric_grad(lambda th: float(f_log(ag.Tensor(th.reshape(2, 6))).data),
                       x0.ravel())
    np.testing.assert_allclose(t.grad.ravel(), num, atol=ATOL)

    y0 = rng.normal(size=(3, 5))

    def f_gelu(t):
        g = ag.gelu(t)
        return ag.reduce_sum(ag.reduce_sum(ag.mul(g, g), 1), 0)

    t = ag.Tensor(y0, requires_grad=True)
    f_gelu(t).backward()
    num = numeric_grad(lambda th: float(f_gelu(ag.Tensor(th.reshape(3, 5))).data),
                       y0.ravel())
    np.testing.assert_allclose(t.grad.ravel(), num, atol=ATOL)

    z0 = rng.normal(size=(4, 6))
    gain = rng.normal(size=6)
    bias = rng.normal(size=6)

    def f_ln(t, g=None, b=None):
        g = ag.Tensor(gain) if g is None else g
        b = ag.Tensor(bias) if b is None else b
        y = ag.layer_norm(t, g, b)
        return ag.reduce_sum(ag.reduce_sum(ag.mul(y, y), 1), 0)

    t = ag.Tensor(z0, requires_grad=True)
    gt = ag.Tensor(gain, requires_grad=True)
    bt = ag.Tensor(bias, requires_grad=True)
    f_ln(t, gt, bt).backward()
    num = numeric_grad(lambda th: float(f_ln(ag.Tensor(th.reshape(4, 6))).data),
                       z0.ravel())
    np.testing.assert_allclose(t.grad.ravel(), num, atol=ATOL)
    num_g = numeric_grad(
        lambda th: float(f_ln(ag.Tensor(z0), ag.Tensor(th), bt).data), gain)
    np.testing.assert_allclose(gt.grad, num_g, atol=ATOL)
    num_b = numeric_grad(
        lambda th: float(f_ln(ag.Tensor(z0), gt, ag.Tensor(th)).data), bias)
    np.testing.assert_allclose(bt.grad, num_b, atol=ATOL)


def test_masked_temp_softmax_grad_and_padding():
    rng = seeded_rng(6)
    z0 = rng.normal(size=(3, 4))
    mask = np.array([[True, True, False, False],
                     [True, True, True, False],
                     [True, True, True, True]])
    probe = rng.normal(size=(3, 4))

    def f(t):
        s = ag.masked_temp_softmax(t, mask, 0.7)
        return ag.reduce_sum(ag.reduce_sum(ag.mul(s, ag.Tensor(probe)), 1), 0)

    t = ag.Tensor(z0, requires_grad=True)
    f(t).backward()
    num = numeric_grad(lambda th: float(f(ag.Tensor(th.reshape(3, 4))).data),
                       z0.ravel())
    np.testing.assert_allclose(t.grad.ravel(), num, atol=ATOL)
    out = ag.masked_temp_softmax(ag.Tensor(z0), mask, 0.7).data
    np.testing.assert_array_equal(out[~mask], 0.0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_grad_and_weighting():
    rng = seeded_rng(7)
    z0 = rng.normal(size=(4, 5))
    targets = np.array([0, 3, 2, 4])
    weights = np.array([1.0, 0.0, 2.0, 1.0])

    def f(t):
        return ag.cross_entropy(t, targets, weights)

    t = ag.Tensor(z0, requires_grad=True)
    f(t).backward()
    num = numeric_grad(lambda th: float(f(ag.Tensor(th.reshape(4, 5))).data),
                       z0.ravel())
    np.testing.assert_allclose(t.grad.ravel(), num, atol=ATOL)
    # a zero-weight row contributes no gradient
    np.testing.assert_array_equal(t.grad[1], np.zeros(5))


def test_cross_entropy_matches_hand_value():
    # Uniform logits over 4 classes: loss is exactly ln 4 regardless of target.
    z = ag.Tensor(np.zeros((2, 4)))
    loss = ag.cross_entropy(z, np.array([1, 3]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(loss.data, np.log(4.0), rtol=1e-12)


def test_reused_tensor_accumulates_gradient():
    x = ag.Tensor(np.array([2.0]), requires_grad=True)
    y = ag.add(ag.mul(x, x), ag.mul(x, x))  # 2x^2, dy/dx = 4x = 8
    ag.reduce_sum(y, 0).backward()
    np.testing.assert_allclose(x.grad, [8.0], atol=1e-12)


def test_constants_have_no_grad():
    x = ag.Tensor(np.ones(3), requires_grad=True)
    c = ag.Tensor(np.ones(3))
    ag.reduce_sum(ag.mul(x, c), 0).backward()
    assert c.grad is None
    np.testing.assert_allclose(x.grad, np.ones(3), atol=1e-12)


def test_parameters_marks_only_trainable():
    arrays = {"a": np.ones(2), "b": np.zeros(3)}
    P = ag.parameters(arrays, trainable=["a"])
    assert P["a"].requires_grad and not P["b"].requires_grad
