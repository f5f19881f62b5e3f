"""Unit tests for the reverse-mode autodiff core.

Forward values are checked against independent references (numpy/scipy);
gradients against central finite differences and hand-derived closed forms.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sig
from scipy import special

from segattack.autodiff import (GraphError, ShapeError, Tensor, add,
                                batchnorm2d, channel_softmax, concat_channels,
                                conv2d, finite_diff_check, mul, relu,
                                tensor_sum, topological_order,
                                transposed_conv2d)


def rand(shape, seed, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=shape)


# -- Tensor basics -------------------------------------------------------------


def test_tensor_holds_float64_and_shape():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.shape == (2, 2)
    assert t.size == 4


def test_item_requires_scalar():
    assert Tensor(3.5).item() == 3.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward_on_leaf_raises():
    with pytest.raises(GraphError):
        Tensor([1.0], requires_grad=True).backward()


def test_gradient_accumulates_across_uses():
    # f = x*x + x -> df/dx = 2x + 1, with x reused in two branches
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_zero_grad_resets():
    x = Tensor([2.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad is not None
    x.zero_grad()
    assert x.grad is None


def test_detach_blocks_gradient():
    x = Tensor([2.0], requires_grad=True)
    y = x.detach() * 3.0
    assert not y.requires_grad


def test_topological_order_parents_before_children():
    x = Tensor([1.0], requires_grad=True)
    a = x * 2.0
    b = x + 1.0
    c = a + b
    order = topological_order(c)
    assert order.index(x) < order.index(a) < order.index(c)
    assert order.index(x) < order.index(b) < order.index(c)


def test_arithmetic_values_match_numpy():
    a = rand((3, 4), 0)
    b = rand((3, 4), 1)
    np.testing.assert_array_equal((Tensor(a) + Tensor(b)).data, a + b)
    np.testing.assert_array_equal((Tensor(a) - Tensor(b)).data, a - b)
    np.testing.assert_array_equal((Tensor(a) * Tensor(b)).data, a * b)
    np.testing.assert_array_equal((2.0 * Tensor(a)).data, 2.0 * a)
    np.testing.assert_array_equal((-Tensor(a)).data, -a)
    np.testing.assert_allclose(Tensor(a).mean().item(), a.mean())


def test_add_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_mul_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_add_mul_gradients_closed_form(seed):
    # d(sum(a*b + a))/da = b + 1, /db = a
    a_val = rand((2, 5), seed)
    b_val = rand((2, 5), seed + 1)
    a = Tensor(a_val, requires_grad=True)
    b = Tensor(b_val, requires_grad=True)
    (a * b + a).sum().backward()
    np.testing.assert_allclose(a.grad, b_val + 1.0)
    np.testing.assert_allclose(b.grad, a_val)


# -- elementwise and reduction ops ---------------------------------------------


def test_relu_forward_and_gradient():
    x = Tensor(np.array([-2.0, -0.5, 0.5, 3.0]), requires_grad=True)
    y = relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 0.5, 3.0])
    tensor_sum(y).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0, 1.0])


def test_sum_and_mean_gradients():
    x = Tensor(rand((4, 3), 7), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((4, 3)))
    x.zero_grad()
    x.mean().backward()
    np.testing.assert_allclose(x.grad, np.full((4, 3), 1.0 / 12.0))


# -- convolution ---------------------------------------------------------------


def conv_reference(x, kernel, bias, stride, padding):
    """Direct cross-correlation via scipy, one (image, filter) pair at a time."""
    n, cin, h, w = x.shape
    cout = kernel.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hs = (h + 2 * padding - kernel.shape[2]) // stride + 1
    ws = (w + 2 * padding - kernel.shape[3]) // stride + 1
    out = np.zeros((n, cout, hs, ws))
    for i in range(n):
        for o in range(cout):
            acc = sum(sig.correlate2d(xp[i, c], kernel[o, c], mode="valid")
                      for c in range(cin))
            out[i, o] = acc[::stride, ::stride] + bias[o]
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_scipy(stride, padding):
    x = rand((2, 3, 8, 8), 10)
    k = rand((4, 3, 3, 3), 11)
    b = rand((4,), 12)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv_reference(x, k, b, stride, padding),
                               atol=1e-12)


def test_conv2d_input_gradient_finite_diff():
    k = rand((2, 2, 3, 3), 20)
    b = rand((2,), 21)
    report = finite_diff_check(
        lambda x: conv2d(x, Tensor(k), Tensor(b), stride=1, padding=1).sum(),
        rand((1, 2, 5, 5), 22))
    assert report.passed, report


def test_conv2d_kernel_and_bias_gradient_finite_diff():
    x = rand((1, 2, 5, 5), 23)
    b = rand((2,), 24)
    report = finite_diff_check(
        lambda kk: conv2d(Tensor(x), kk, Tensor(b), stride=2, padding=1).sum(),
        rand((2, 2, 3, 3), 25))
    assert report.passed, report
    k = rand((2, 2, 3, 3), 26)
    report = finite_diff_check(
        lambda bb: conv2d(Tensor(x), Tensor(k), bb, stride=1, padding=0).sum(),
        rand((2,), 27))
    assert report.passed, report


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((2, 3, 8))), Tensor(np.ones((4, 3, 3, 3))),
               Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 8, 8))), Tensor(np.ones((4, 3, 3, 3))),
               Tensor(np.ones(4)))


# -- transposed convolution -----------------------------------------------------


def tconv_reference(x, kernel, bias):
    """2x2 stride-2 transposed conv: each input pixel paints a 2x2 block."""
    n, cin, h, w = x.shape
    cout = kernel.shape[1]
    out = np.zeros((n, cout, 2 * h, 2 * w))
    for i in range(n):
        for o in range(cout):
            for c in range(cin):
                for dr in range(2):
                    for dc in range(2):
                        out[i, o, dr::2, dc::2] += x[i, c] * kernel[c, o, dr, dc]
            out[i, o] += bias[o]
    return out


def test_transposed_conv2d_matches_reference():
    x = rand((2, 3, 4, 4), 30)
    k = rand((3, 2, 2, 2), 31)
    b = rand((2,), 32)
    out = transposed_conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2)
    assert out.shape == (2, 2, 8, 8)
    np.testing.assert_allclose(out.data, tconv_reference(x, k, b), atol=1e-12)


def test_transposed_conv2d_gradients_finite_diff():
    k = rand((2, 3, 2, 2), 33)
    b = rand((3,), 34)
    report = finite_diff_check(
        lambda x: transposed_conv2d(x, Tensor(k), Tensor(b)).sum(),
        rand((1, 2, 3, 3), 35))
    assert report.passed, report
    x = rand((1, 2, 3, 3), 36)
    report = finite_diff_check(
        lambda kk: transposed_conv2d(Tensor(x), kk, Tensor(b)).sum(),
        rand((2, 3, 2, 2), 37))
    assert report.passed, report


# -- batch normalization ---------------------------------------------------------


def test_batchnorm_train_normalizes_and_updates_buffers():
    x = rand((4, 3, 5, 5), 40, scale=2.0) + 1.5
    gamma = np.ones(3)
    beta = np.zeros(3)
    rm = np.zeros(3)
    rv = np.ones(3)
    out = batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv,
                      training=True, momentum=0.1)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_eval_is_affine_in_running_stats():
    x = rand((2, 3, 4, 4), 41)
    gamma = rand((3,), 42)
    beta = rand((3,), 43)
    rm = rand((3,), 44)
    rv = np.abs(rand((3,), 45)) + 0.5
    out = batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), rm.copy(), rv.copy(),
                      training=False, eps=1e-5)
    expected = (x - rm[:, None, None]) / np.sqrt(rv[:, None, None] + 1e-5)
    expected = expected * gamma[:, None, None] + beta[:, None, None]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_batchnorm_eval_does_not_touch_buffers():
    x = rand((2, 2, 3, 3), 46)
    rm = np.array([0.3, -0.2])
    rv = np.array([1.1, 0.9])
    rm0, rv0 = rm.copy(), rv.copy()
    batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                training=False)
    np.testing.assert_array_equal(rm, rm0)
    np.testing.assert_array_equal(rv, rv0)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients_finite_diff(training):
    # weight the output: the plain sum of train-mode output is constant in x
    # (normalized values are mean-zero), which would make the check vacuous
    gamma = rand((2,), 50)
    beta = rand((2,), 51)
    rm = rand((2,), 52)
    rv = np.abs(rand((2,), 53)) + 0.5
    weights = Tensor(rand((2, 2, 4, 4), 49))

    def run(x):
        out = batchnorm2d(x, Tensor(gamma), Tensor(beta), rm.copy(), rv.copy(),
                          training=training)
        return (out * weights).sum()

    report = finite_diff_check(run, rand((2, 2, 4, 4), 54))
    assert report.passed, report

    x = rand((2, 2, 4, 4), 55)
    report = finite_diff_check(
        lambda gg: (batchnorm2d(Tensor(x), gg, Tensor(beta), rm.copy(), rv.copy(),
                                training=training) * weights).sum(), gamma)
    assert report.passed, report


def test_batchnorm_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        batchnorm2d(Tensor(np.ones((2, 3, 4))), Tensor(np.ones(3)),
                    Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)
    with pytest.raises(ShapeError):
        batchnorm2d(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones(2)),
                    Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)


# -- softmax and concatenation ----------------------------------------------------


def test_channel_softmax_matches_scipy():
    x = rand((2, 4, 3, 3), 60, scale=3.0)
    out = channel_softmax(Tensor(x))
    np.testing.assert_allclose(out.data, special.softmax(x, axis=1), atol=1e-12)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_channel_softmax_gradient_finite_diff():
    report = finite_diff_check(
        lambda x: (channel_softmax(x) * Tensor(rand((1, 3, 2, 2), 61))).sum(),
        rand((1, 3, 2, 2), 62))
    assert report.passed, report


def test_concat_channels_values_and_gradient():
    a_val = rand((2, 2, 3, 3), 70)
    b_val = rand((2, 3, 3, 3), 71)
    a = Tensor(a_val, requires_grad=True)
    b = Tensor(b_val, requires_grad=True)
    out = concat_channels(a, b)
    np.testing.assert_array_equal(out.data, np.concatenate([a_val, b_val], axis=1))
    weights = rand((2, 5, 3, 3), 72)
    (out * Tensor(weights)).sum().backward()
    np.testing.assert_array_equal(a.grad, weights[:, :2])
    np.testing.assert_array_equal(b.grad, weights[:, 2:])


def test_concat_channels_rejects_mismatched_spatial():
    with pytest.raises(ShapeError):
        concat_channels(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 3, 4))))


# -- finite-difference checker itself ---------------------------------------------


def test_finite_diff_check_passes_smooth_op():
    report = finite_diff_check(lambda x: (x * x).sum(), rand((3, 3), 80))
    assert report.passed
    assert report.max_rel_error < 1e-6


def test_finite_diff_check_catches_wrong_gradient():
    from segattack.autodiff import accumulate_grad, make_node

    def broken_square_sum(x):
        out = float((x.data ** 2).sum())

        def bw(g):
            accumulate_grad(x, 3.0 * x.data * g)  # wrong: should be 2x
        return make_node(np.float64(out), (x,), bw, "broken")

    report = finite_diff_check(broken_square_sum, rand((3, 3), 81) + 2.0)
    assert not report.passed


def test_finite_diff_check_rejects_non_scalar():
    with pytest.raises(ShapeError):
        finite_diff_check(lambda x: x * 2.0, rand((2, 2), 82))
