"""Autodiff engine: forward values against direct loops, gradients against
central differences."""

import numpy as np
import pytest

from scenefusion.nn import Parameter, grad_check
from scenefusion.tensor import (
    Tensor,
    add,
    add_all,
    channel_pool,
    concat,
    concat_channels,
    conv1d_channels,
    conv2d,
    global_pool,
    linear,
    mul,
    no_grad,
    pool_and_resize,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_channels,
    transpose,
    tsum,
    weighted_sum,
)

TOL = 1e-6


def P(rng, *shape, lo=-1.0, hi=1.0):
    return Parameter(rng.uniform(lo, hi, size=shape))


def readout(t, seed=7):
    w = np.random.default_rng(seed).normal(size=t.shape)
    return weighted_sum(t, w)


def conv_loop(x, w, b, stride, pad):
    """Direct 7-loop cross-correlation, the textbook definition."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + (0 if b is None else b[o])
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 3, 7), (1, 0, 1)])
def test_conv2d_forward_matches_loops(stride, pad, k):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv_loop(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv2d_gradients(stride, pad):
    rng = np.random.default_rng(1)
    x, w, b = P(rng, 2, 3, 8, 8), P(rng, 4, 3, 3, 3), P(rng, 4)
    rep = grad_check(lambda: readout(conv2d(x, w, b, stride, pad)), [("x", x), ("w", w), ("b", b)])
    assert rep.max_rel_err < TOL, rep


def test_linear_and_sigmoid_gradients():
    rng = np.random.default_rng(2)
    x, w, b = P(rng, 5, 6), P(rng, 3, 6), P(rng, 3)
    rep = grad_check(lambda: readout(sigmoid(linear(x, w, b))), [("x", x), ("w", w), ("b", b)])
    assert rep.max_rel_err < TOL, rep


@pytest.mark.parametrize("kind", ["avg", "max"])
def test_global_pool(kind):
    rng = np.random.default_rng(3)
    x = P(rng, 2, 3, 4, 5)
    ref = x.data.mean(axis=(2, 3)) if kind == "avg" else x.data.max(axis=(2, 3))
    np.testing.assert_allclose(global_pool(x, kind).data, ref)
    rep = grad_check(lambda: readout(global_pool(x, kind)), [("x", x)])
    assert rep.max_rel_err < TOL, rep


def test_global_max_pool_routes_gradient_to_first_maximum():
    x = Parameter(np.array([[[[1.0, 3.0], [3.0, 0.0]]]]))
    tsum(global_pool(x, "max")).backward()
    np.testing.assert_array_equal(x.grad, [[[[0, 1], [0, 0]]]])


@pytest.mark.parametrize("kind", ["mean", "max"])
def test_channel_pool(kind):
    rng = np.random.default_rng(4)
    x = P(rng, 2, 5, 3, 3)
    ref = x.data.mean(axis=1, keepdims=True) if kind == "mean" else x.data.max(axis=1, keepdims=True)
    np.testing.assert_allclose(channel_pool(x, kind).data, ref)
    rep = grad_check(lambda: readout(channel_pool(x, kind)), [("x", x)])
    assert rep.max_rel_err < TOL, rep


@pytest.mark.parametrize("mask_shape", [(2, 3, 4, 4), (2, 3, 1, 1), (2, 1, 4, 4)])
def test_mul_add_broadcast_masks(mask_shape):
    rng = np.random.default_rng(5)
    a, m = P(rng, 2, 3, 4, 4), P(rng, *mask_shape)
    np.testing.assert_allclose(mul(a, m).data, a.data * m.data)
    np.testing.assert_allclose(add(a, m).data, a.data + m.data)
    rep = grad_check(lambda: add(readout(mul(a, m)), readout(add(a, m), seed=9)), [("a", a), ("m", m)])
    assert rep.max_rel_err < TOL, rep


def test_elementwise_rejects_general_broadcasting():
    a = Tensor(np.zeros((2, 3, 4, 4)))
    with pytest.raises(ValueError):
        mul(a, Tensor(np.zeros((1, 3, 4, 4))))


def test_shape_ops_gradients():
    rng = np.random.default_rng(6)
    a, b = P(rng, 2, 3, 4, 4), P(rng, 2, 2, 4, 4)
    params = [("a", a), ("b", b)]

    def f():
        c = concat_channels(a, b)
        s = slice_channels(c, 1, 4)
        t = transpose(reshape(s, (2, 3, 16)), (0, 2, 1))
        u = concat([a, scale(a, 2.0)], axis=3)
        return add_all([readout(t), readout(u, seed=3), tsum(relu(b))])

    rep = grad_check(f, params)
    assert rep.max_rel_err < TOL, rep


@pytest.mark.parametrize("kind", ["maxpool2", "upsample_nearest2"])
def test_pool_and_resize(kind):
    rng = np.random.default_rng(8)
    x = P(rng, 1, 2, 4, 6)
    out = pool_and_resize(x, kind)
    if kind == "maxpool2":
        ref = x.data.reshape(1, 2, 2, 2, 3, 2).max(axis=(3, 5))
    else:
        ref = np.kron(x.data, np.ones((1, 1, 2, 2)))
    np.testing.assert_allclose(out.data, ref)
    rep = grad_check(lambda: readout(pool_and_resize(x, kind)), [("x", x)])
    assert rep.max_rel_err < TOL, rep


def test_conv1d_channels_matches_numpy_correlate():
    rng = np.random.default_rng(9)
    x, k = P(rng, 3, 8), P(rng, 3)
    out = conv1d_channels(x, k)
    for i in range(3):
        np.testing.assert_allclose(out.data[i], np.correlate(x.data[i], k.data, mode="same"))
    rep = grad_check(lambda: readout(conv1d_channels(x, k)), [("x", x), ("k", k)])
    assert rep.max_rel_err < TOL, rep


def test_conv1d_rejects_even_width():
    with pytest.raises(ValueError):
        conv1d_channels(Tensor(np.zeros((1, 4))), Tensor(np.zeros(2)))


def test_shared_subexpression_accumulates():
    # y = x*x + x, dy/dx = 2x + 1
    x = Parameter(np.array([[[[1.5]]], [[[-2.0]]]]))
    tsum(add(mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_requires_scalar_tracked_loss():
    x = Parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        scale(x, 2.0).backward()
    with pytest.raises(ValueError):
        tsum(Tensor(np.ones(3))).backward()


def test_no_grad_builds_no_graph():
    x = Parameter(np.ones((1, 1, 2, 2)))
    with no_grad():
        y = tsum(mul(x, x))
    assert not y.requires_grad and y._parents == ()
    assert tsum(x).requires_grad


def test_frozen_parents_get_no_gradient():
    x = Tensor(np.ones((1, 2)))
    w = Parameter(np.ones((3, 2)))
    tsum(linear(x, w)).backward()
    assert x.grad is None
    np.testing.assert_allclose(w.grad, np.ones((3, 2)))
