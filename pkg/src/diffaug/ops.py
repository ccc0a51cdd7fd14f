"""Differentiable primitives over :class:`diffaug.tensor.Tensor`.

Every backward closure here is written in terms of these same ops, so the
backward pass can itself be recorded (``grad(..., create_graph=True)``); the
gradient-penalty path relies on that. Elementwise binary ops broadcast only
over a leading batch dimension or a python scalar; anything richer must go
through :func:`expand` explicitly.

Convolution comes as a closed family of three bilinear primitives — conv2d,
its input adjoint and its weight adjoint — each of whose backwards are the
other two. Nearest-neighbour upsampling pairs the same way with sumpool2x.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import (
    Node,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    debug_checks_enabled,
    grad_enabled,
)

_f32 = np.float32


def _make(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _check_finite(op: str, *tensors: Tensor) -> None:
    if not debug_checks_enabled():
        return
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input values")


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_f32))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=_f32))


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_f32))


# ---------------------------------------------------------------------------
# elementwise binary ops


def _broadcast_kind(op: str, a: Tensor, b: Tensor) -> Optional[str]:
    """None: equal shapes. "a"/"b": that operand broadcasts over the other's
    leading batch dim."""
    if a.shape == b.shape:
        return None
    if len(b.shape) == len(a.shape) + 1 and a.shape == b.shape[1:]:
        return "a"
    if len(a.shape) == len(b.shape) + 1 and b.shape == a.shape[1:]:
        return "b"
    raise ShapeError(op, a.shape, b.shape)


def _debatch(g: Tensor, kind_small: bool) -> Tensor:
    return reduce_sum(g, axes=(0,)) if kind_small else g


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        _check_finite("add", a)
        return _make("add", a.data + _f32(b), (a,), lambda g: (g,))
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("add", a, b)
    kind = _broadcast_kind("add", a, b)

    def bwd(g):
        return (_debatch(g, kind == "a"), _debatch(g, kind == "b"))

    return _make("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    if isinstance(a, (int, float)):
        return add(neg(b), a)
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("sub", a, b)
    kind = _broadcast_kind("sub", a, b)

    def bwd(g):
        return (_debatch(g, kind == "a"), _debatch(neg(g), kind == "b"))

    return _make("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        _check_finite("mul", a)
        s = float(b)
        return _make("mul", a.data * _f32(s), (a,), lambda g: (mul(g, s),))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("mul", a, b)
    kind = _broadcast_kind("mul", a, b)

    def bwd(g):
        return (_debatch(mul(g, b), kind == "a"), _debatch(mul(g, a), kind == "b"))

    return _make("mul", a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    if isinstance(a, (int, float)):
        b = as_tensor(b)
        _check_finite("div", b)
        s = float(a)
        out = _make("div", _f32(s) / b.data, (b,), None)

        def bwd_r(g):
            return (neg(mul(g, div(out, b))),)

        if out.node is not None:
            out.node.backward_fn = bwd_r
        return out
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("div", a, b)
    kind = _broadcast_kind("div", a, b)

    def bwd(g):
        ga = div(g, b)
        gb = neg(mul(ga, div(a, b)))
        return (_debatch(ga, kind == "a"), _debatch(gb, kind == "b"))

    return _make("div", a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


# ---------------------------------------------------------------------------
# matmul family


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("matmul", a, b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out_batched = a.ndim == 3 or b.ndim == 3

    def bwd(g):
        ga = matmul(g, transpose(b))
        gb = matmul(transpose(a), g)
        if out_batched and a.ndim == 2:
            ga = reduce_sum(ga, axes=(0,))
        if out_batched and b.ndim == 2:
            gb = reduce_sum(gb, axes=(0,))
        return (ga, gb)

    return _make("matmul", np.matmul(a.data, b.data), (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape)
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _make("transpose", out, (a,), lambda g: (transpose(g),))


# ---------------------------------------------------------------------------
# convolution family (bilinear, mutually adjoint)
#
# Internals stay on plain 2D GEMMs: the broadcast/batched matmul path of
# numpy+OpenBLAS is two orders of magnitude slower here. Patches move between
# image and column layout via kh*kw strided slice copies, never fancy
# indexing. Column layout is (K, B*L) with K = cin*kh*kw, L = ho*wo.


def _conv_geom(h, w, kh, kw, stride, pad):
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", (h, w), (kh, kw))
    return hp, wp, (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _im2col(xd: np.ndarray, kh, kw, stride, pad):
    b, cin, h, w = xd.shape
    hp, wp, ho, wo = _conv_geom(h, w, kh, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((b, cin, kh, kw, ho, wo), dtype=_f32)
    for a in range(kh):
        for c in range(kw):
            cols[:, :, a, c] = xp[:, :, a : a + stride * ho : stride, c : c + stride * wo : stride]
    k_sz = cin * kh * kw
    cols2 = np.ascontiguousarray(
        cols.reshape(b, k_sz, ho * wo).transpose(1, 0, 2)
    ).reshape(k_sz, b * ho * wo)
    return cols2, (ho, wo)


def _col2im(gcols2: np.ndarray, b, cin, h, w, kh, kw, stride, pad):
    hp, wp, ho, wo = _conv_geom(h, w, kh, kw, stride, pad)
    g6 = np.ascontiguousarray(
        gcols2.reshape(cin * kh * kw, b, ho * wo).transpose(1, 0, 2)
    ).reshape(b, cin, kh, kw, ho, wo)
    gxp = np.zeros((b, cin, hp, wp), dtype=_f32)
    for a in range(kh):
        for c in range(kw):
            gxp[:, :, a : a + stride * ho : stride, c : c + stride * wo : stride] += g6[:, :, a, c]
    if pad:
        gxp = np.ascontiguousarray(gxp[:, :, pad:-pad, pad:-pad])
    return gxp


def _to_bchw(out2: np.ndarray, b, cout, ho, wo):
    return np.ascontiguousarray(out2.reshape(cout, b, ho * wo).transpose(1, 0, 2)).reshape(
        b, cout, ho, wo
    )


def _from_bchw(g: np.ndarray):
    b, cout, ho, wo = g.shape
    return np.ascontiguousarray(g.reshape(b, cout, ho * wo).transpose(1, 0, 2)).reshape(
        cout, b * ho * wo
    )


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """2D cross-correlation, NCHW, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    _check_finite("conv2d", x, w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    cols2, (ho, wo) = _im2col(x.data, kh, kw, stride, padding)
    out = _to_bchw(w.data.reshape(cout, -1) @ cols2, b, cout, ho, wo)

    def bwd(g):
        gx = conv2d_input_grad(g, w, (h, wd), stride, padding)
        gw = conv2d_weight_grad(x, g, (kh, kw), stride, padding, _cols2=cols2)
        return (gx, gw)

    return _make("conv2d", out, (x, w), bwd)


def conv2d_input_grad(
    g: Tensor, w: Tensor, x_hw: tuple, stride: int = 1, padding: int = 1
) -> Tensor:
    """Adjoint of conv2d w.r.t. its input (a transposed convolution)."""
    g, w = as_tensor(g), as_tensor(w)
    _check_finite("conv2d_input_grad", g, w)
    h, wd = x_hw
    b = g.shape[0]
    cout, cin, kh, kw = w.shape
    hp, wp, ho, wo = _conv_geom(h, wd, kh, kw, stride, padding)
    if g.shape != (b, cout, ho, wo):
        raise ShapeError("conv2d_input_grad", g.shape, (b, cout, ho, wo))
    gcols2 = w.data.reshape(cout, -1).T @ _from_bchw(g.data)
    gx = _col2im(gcols2, b, cin, h, wd, kh, kw, stride, padding)

    def bwd(u):
        return (
            conv2d(u, w, stride, padding),
            conv2d_weight_grad(u, g, (kh, kw), stride, padding),
        )

    return _make("conv2d_input_grad", gx, (g, w), bwd)


def conv2d_weight_grad(
    x: Tensor, g: Tensor, k_hw: tuple, stride: int = 1, padding: int = 1, _cols2=None
) -> Tensor:
    """Adjoint of conv2d w.r.t. its weights."""
    x, g = as_tensor(x), as_tensor(g)
    _check_finite("conv2d_weight_grad", x, g)
    kh, kw = k_hw
    b, cin, h, wd = x.shape
    cout = g.shape[1]
    if _cols2 is None:
        _cols2, (ho, wo) = _im2col(x.data, kh, kw, stride, padding)
    else:
        _, _, ho, wo = _conv_geom(h, wd, kh, kw, stride, padding)
    if g.shape != (b, cout, ho, wo):
        raise ShapeError("conv2d_weight_grad", g.shape, (b, cout, ho, wo))
    gw = (_from_bchw(g.data) @ _cols2.T).reshape(cout, cin, kh, kw)

    def bwd(v):
        return (
            conv2d_input_grad(g, v, (h, wd), stride, padding),
            conv2d(x, v, stride, padding),
        )

    return _make("conv2d_weight_grad", gw, (x, g), bwd)


# ---------------------------------------------------------------------------
# resampling pair


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("upsample_nearest2x", x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x", x.shape)
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make("upsample_nearest2x", out, (x,), lambda g: (sumpool2x(g),))


def sumpool2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("sumpool2x", x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("sumpool2x", x.shape)
    b, c, h, w = x.shape
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
    return _make("sumpool2x", out, (x,), lambda g: (upsample_nearest2x(g),))


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    _check_finite("leaky_relu", x)
    mask = np.where(x.data > 0, _f32(1.0), _f32(alpha))
    mask_t = Tensor(mask)
    return _make("leaky_relu", x.data * mask, (x,), lambda g: (mul(g, mask_t),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("tanh", x)
    out = _make("tanh", np.tanh(x.data), (x,), None)

    def bwd(g):
        return (mul(g, sub(1.0, square(out))),)

    if out.node is not None:
        out.node.backward_fn = bwd
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("sigmoid", x)
    xd = x.data
    out_d = np.empty_like(xd)
    pos = xd >= 0
    out_d[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_d[~pos] = ex / (1.0 + ex)
    out = _make("sigmoid", out_d, (x,), None)

    def bwd(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    if out.node is not None:
        out.node.backward_fn = bwd
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed overflow-free."""
    x = as_tensor(x)
    _check_finite("softplus", x)
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _make("softplus", out, (x,), lambda g: (mul(g, sigmoid(x)),))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("log", x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (div(g, x),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("exp", x)
    out = _make("exp", np.exp(x.data), (x,), None)

    def bwd(g):
        return (mul(g, out),)

    if out.node is not None:
        out.node.backward_fn = bwd
    return out


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("square", x)
    return _make("square", x.data * x.data, (x,), lambda g: (mul(g, mul(x, 2.0)),))


def maximum(x: Tensor, scalar: float) -> Tensor:
    """Elementwise max(x, scalar); the tie x == scalar gets zero gradient."""
    x = as_tensor(x)
    _check_finite("maximum", x)
    s = _f32(scalar)
    mask_t = Tensor((x.data > s).astype(_f32))
    return _make("maximum", np.maximum(x.data, s), (x,), lambda g: (mul(g, mask_t),))


# ---------------------------------------------------------------------------
# reductions, shape ops


def _norm_axes(op, axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(op, axes)
    return axes


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_finite("reduce_sum", x)
    ax = _norm_axes("reduce_sum", axes, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)
    kshape = tuple(1 if i in ax else s for i, s in enumerate(x.shape))
    shape = x.shape

    def bwd(g):
        return (expand(reshape(g, kshape), shape),)

    return _make("reduce_sum", out, (x,), bwd)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_finite("reduce_mean", x)
    ax = _norm_axes("reduce_mean", axes, x.ndim)
    out = x.data.mean(axis=ax, keepdims=keepdims)
    n = 1
    for a in ax:
        n *= x.shape[a]
    kshape = tuple(1 if i in ax else s for i, s in enumerate(x.shape))
    shape = x.shape
    inv_n = 1.0 / n

    def bwd(g):
        return (expand(reshape(mul(g, inv_n), kshape), shape),)

    return _make("reduce_mean", out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    orig = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (reshape(g, orig),))


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast to a larger shape; the adjoint sums over broadcast axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError:
        raise ShapeError("expand", x.shape, shape) from None
    in_shape = x.shape
    ndiff = len(shape) - len(in_shape)
    sum_axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, s in enumerate(in_shape) if s == 1 and shape[i + ndiff] != 1
    )

    def bwd(g):
        gg = reduce_sum(g, axes=sum_axes) if sum_axes else g
        return (reshape(gg, in_shape),)

    return _make("expand", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", ())
    _check_finite("concat", *ts)
    nd = ts[0].ndim
    axis = axis % nd
    base = list(ts[0].shape)
    for t in ts[1:]:
        s = list(t.shape)
        if len(s) != nd or s[:axis] + s[axis + 1 :] != base[:axis] + base[axis + 1 :]:
            raise ShapeError("concat", ts[0].shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bwd(g):
        grads = []
        for i, t in enumerate(ts):
            starts = [0] * nd
            sizes = list(g.shape)
            starts[axis] = int(offsets[i])
            sizes[axis] = t.shape[axis]
            grads.append(narrow(g, starts, sizes))
        return tuple(grads)

    return _make("concat", out, tuple(ts), bwd)


def narrow(x: Tensor, starts: Sequence[int], sizes: Sequence[int]) -> Tensor:
    """Slice a contiguous block: out = x[s0:s0+n0, s1:s1+n1, ...]."""
    x = as_tensor(x)
    starts, sizes = list(starts), list(sizes)
    if len(starts) != x.ndim or len(sizes) != x.ndim:
        raise ShapeError("narrow", x.shape, tuple(sizes))
    for d, (s, n) in enumerate(zip(starts, sizes)):
        if s < 0 or n < 0 or s + n > x.shape[d]:
            raise ShapeError("narrow", x.shape, tuple(sizes))
    sl = tuple(slice(s, s + n) for s, n in zip(starts, sizes))
    out = np.ascontiguousarray(x.data[sl])
    pads = [(s, x.shape[d] - s - n) for d, (s, n) in enumerate(zip(starts, sizes))]

    def bwd(g):
        return (pad_zero(g, pads),)

    return _make("narrow", out, (x,), bwd)


def pad_zero(x: Tensor, pads: Sequence[tuple]) -> Tensor:
    """Zero-pad: pads is one (before, after) pair per axis."""
    x = as_tensor(x)
    pads = [tuple(p) for p in pads]
    if len(pads) != x.ndim or any(p[0] < 0 or p[1] < 0 for p in pads):
        raise ShapeError("pad_zero", x.shape, tuple(pads))
    out = np.pad(x.data, pads)
    starts = [p[0] for p in pads]
    sizes = list(x.shape)

    def bwd(g):
        return (narrow(g, starts, sizes),)

    return _make("pad_zero", out, (x,), bwd)


def shift2d(x: Tensor, shift_x: np.ndarray, shift_y: np.ndarray) -> Tensor:
    """Per-image integer translation with zero fill (NCHW).

    Positive shift_x moves content right, positive shift_y moves it down.
    The adjoint is the inverse shift, so this op closes under backward.
    """
    x = as_tensor(x)
    _check_finite("shift2d", x)
    if x.ndim != 4:
        raise ShapeError("shift2d", x.shape)
    b, c, h, w = x.shape
    sx = np.asarray(shift_x, dtype=np.int64).reshape(-1)
    sy = np.asarray(shift_y, dtype=np.int64).reshape(-1)
    if sx.shape[0] != b or sy.shape[0] != b:
        raise ShapeError("shift2d", (b,), (sx.shape[0], sy.shape[0]))
    if np.any(np.abs(sx) > w) or np.any(np.abs(sy) > h):
        raise ValueError("shift2d: shift exceeds image size")
    out = np.zeros_like(x.data)
    for i in range(b):
        dx, dy = int(sx[i]), int(sy[i])
        y0, y1 = max(0, dy), h + min(0, dy)
        x0, x1 = max(0, dx), w + min(0, dx)
        if y1 > y0 and x1 > x0:
            out[i, :, y0:y1, x0:x1] = x.data[i, :, y0 - dy : y1 - dy, x0 - dx : x1 - dx]

    def bwd(g):
        return (shift2d(g, -sx, -sy),)

    return _make("shift2d", out, (x,), bwd)


# ---------------------------------------------------------------------------
# operator sugar

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
