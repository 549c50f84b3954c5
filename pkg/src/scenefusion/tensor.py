"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every operation records its parents and a backward closure on the output
tensor. ``backward`` replays the recorded operations in exact reverse
creation order, so gradients of a tensor used several times accumulate
additively before they are propagated further.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_counter = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr is data:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    # operator sugar, restricted to the shapes ``mul``/``add`` accept
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_counter)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)

        def _bw(g: np.ndarray) -> None:
            grads = backward_fn(g)
            for p, pg in zip(parents, grads):
                if pg is not None and p.requires_grad:
                    p._accumulate(pg)

        out._backward = _bw
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    loss._accumulate(np.ones_like(loss.data))
    for t in order:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# ---------------------------------------------------------------- primitives


def _check_rank(x: Tensor, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ValueError(f"{name}: expected rank {rank}, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,Cin,H,W]`` with ``weight[Cout,Cin,k,k]``."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    B, Cin, H, W = x.shape
    Cout, wCin, kh, kw = weight.shape
    if wCin != Cin:
        raise ValueError(f"conv2d: input channels {Cin} != weight in-channels {wCin}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: output height/width {Ho}x{Wo} < 1 for input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * k * k)
    wmat = weight.data.reshape(Cout, Cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((gm @ wmat).reshape(B, Ho, Wo, Cin, k, k).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        res = [gx, gw]
        if bias is not None:
            res.append(gb)
        return res

    return make_op(out, parents, bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x[B,Din]``, ``weight[Dout,Din]``."""
    _check_rank(x, 2, "linear input")
    _check_rank(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[1]} != weight Din {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        res = [g @ weight.data if x.requires_grad else None, g.T @ x.data if weight.requires_grad else None]
        if bias is not None:
            res.append(g.sum(axis=0))
        return res

    return make_op(out, parents, bw)


def global_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce ``[B,C,H,W]`` over all spatial positions to ``[B,C]``."""
    _check_rank(x, 4, "global_pool input")
    B, C, H, W = x.shape
    flat = x.data.reshape(B, C, H * W)
    if kind == "avg":
        out = flat.mean(axis=2)

        def bw(g):
            return [np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).copy()]
    elif kind == "max":
        idx = flat.argmax(axis=2)  # first maximum in row-major order
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

        def bw(g):
            gx = np.zeros((B, C, H * W))
            np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
            return [gx.reshape(x.shape)]
    else:
        raise ValueError(f"global_pool: unknown kind {kind!r}")
    return make_op(out, [x], bw)


def channel_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce ``[B,C,H,W]`` over channels to ``[B,1,H,W]``."""
    _check_rank(x, 4, "channel_pool input")
    C = x.shape[1]
    if kind == "mean":
        out = x.data.mean(axis=1, keepdims=True)

        def bw(g):
            return [np.broadcast_to(g / C, x.shape).copy()]
    elif kind == "max":
        idx = x.data.argmax(axis=1)[:, None]
        out = np.take_along_axis(x.data, idx, axis=1)

        def bw(g):
            gx = np.zeros(x.shape)
            np.put_along_axis(gx, idx, g, axis=1)
            return [gx]
    else:
        raise ValueError(f"channel_pool: unknown kind {kind!r}")
    return make_op(out, [x], bw)


def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)

    def bw(g):
        return [g * out * (1.0 - out)]

    return make_op(out, [x], bw)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return make_op(out, [x], lambda g: [g * mask])


def _broadcast_kind(a_shape: tuple, b_shape: tuple) -> str:
    if a_shape == b_shape:
        return "same"
    if len(a_shape) == 4 and len(b_shape) == 4:
        B, C, H, W = a_shape
        if b_shape == (B, C, 1, 1):
            return "channel"
        if b_shape == (B, 1, H, W):
            return "spatial"
    raise ValueError(f"elementwise: shapes {a_shape} and {b_shape} are not broadcastable "
                     "(only equal shapes, [B,C,1,1] or [B,1,H,W] masks are supported)")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """``a * b`` or ``a + b``; ``b`` may be a channel or spatial mask over ``a``."""
    bk = _broadcast_kind(a.shape, b.shape)
    axes = {"same": None, "channel": (2, 3), "spatial": (1,)}[bk]

    def reduce_b(g):
        return g if axes is None else g.sum(axis=axes, keepdims=True)

    if kind == "mul":
        out = a.data * b.data

        def bw(g):
            return [g * b.data if a.requires_grad else None, reduce_b(g * a.data) if b.requires_grad else None]
    elif kind == "add":
        out = a.data + b.data

        def bw(g):
            return [g, reduce_b(g)]
    else:
        raise ValueError(f"elementwise: unknown kind {kind!r}")
    return make_op(out, [a, b], bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank(a, 4, "concat_channels a")
    _check_rank(b, 4, "concat_channels b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_op(out, [a, b], lambda g: [g[:, :ca], g[:, ca:]])


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank(x, 4, "slice_channels input")
    out = x.data[:, start:stop].copy()

    def bw(g):
        gx = np.zeros(x.shape)
        gx[:, start:stop] = g
        return [gx]

    return make_op(out, [x], bw)


def pool_and_resize(x: Tensor, kind: str) -> Tensor:
    """2x2 max pooling (stride 2) or 2x nearest-neighbour upsampling."""
    _check_rank(x, 4, "pool_and_resize input")
    B, C, H, W = x.shape
    if kind == "maxpool2":
        if H % 2 or W % 2:
            raise ValueError(f"maxpool2: spatial dims must be even, got {H}x{W}")
        blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
        idx = blocks.argmax(axis=4)
        out = np.take_along_axis(blocks, idx[..., None], axis=4)[..., 0]

        def bw(g):
            gb = np.zeros(blocks.shape)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=4)
            return [gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)]
    elif kind == "upsample_nearest2":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)

        def bw(g):
            return [g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))]
    else:
        raise ValueError(f"pool_and_resize: unknown kind {kind!r}")
    return make_op(out, [x], bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    return make_op(out, [x], lambda g: [g.reshape(x.shape)])


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    return make_op(np.array(x.data.sum()), [x], lambda g: [np.full(x.shape, float(g))])


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant ``weights``; used for readouts."""
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
    return make_op(np.array((x.data * w).sum()), [x], lambda g: [float(g) * w])


def scale(x: Tensor, c: float) -> Tensor:
    return make_op(x.data * c, [x], lambda g: [g * c])


def add_all(terms: Iterable[Tensor]) -> Tensor:
    """Sum of same-shaped tensors."""
    terms = list(terms)
    out = terms[0].data.copy()
    for t in terms[1:]:
        out = out + t.data
    return make_op(out, terms, lambda g: [g] * len(terms))


def conv1d_channels(x: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded 1-D cross-correlation along the channel axis of ``x[B,C]``."""
    _check_rank(x, 2, "conv1d_channels input")
    k = kernel.shape[0]
    if kernel.ndim != 1 or k % 2 == 0:
        raise ValueError(f"conv1d_channels: kernel must be 1-D with odd width, got shape {kernel.shape}")
    B, C = x.shape
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=1)  # [B, C, k]
    out = win @ kernel.data

    def bw(g):
        gk = np.einsum("bc,bck->k", g, win) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[:, j:j + C] += g * kernel.data[j]
            gx = gxp[:, pad:pad + C]
        return [gx, gk]

    return make_op(out, [x, kernel], bw)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    return make_op(np.ascontiguousarray(x.data.transpose(axes)), [x], lambda g: [g.transpose(inv)])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        sl = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            res.append(g[tuple(sl)])
        return res

    return make_op(out, tensors, bw)
