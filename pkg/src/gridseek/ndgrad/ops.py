"""Differentiable operations.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` where an input
is not differentiable).  Layout for images is (batch, channel, row, column).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import DegenerateEmbeddingError, DomainError, ShapeError
from .tensor import Tensor, as_tensor, make_result

EPS_NORM = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return make_result(ad / bd, (a, b), back)


def scalar_mul(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return make_result(x.data * x.data.dtype.type(s), (x,), lambda g: (g * s,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,))


# ----------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scalar_mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(x, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Stable ``log(sum(exp(x)))`` over ``axis``, restricted to ``mask``.

    The running maximum is subtracted before exponentiation; it is treated
    as a constant since the result does not depend on the shift.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is None:
        mask = np.ones(xd.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    if not np.all(mask.any(axis=axis)):
        raise DomainError("logsumexp over an empty set")
    masked = np.where(mask, xd, -np.inf)
    m = masked.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0).astype(xd.dtype)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.squeeze(m, axis) + np.log(np.squeeze(s, axis))).astype(xd.dtype)
    soft = e / s

    def back(g):
        return (np.expand_dims(g, axis) * soft,)

    return make_result(out, (x,), back)


# -------------------------------------------------------------------- shaping

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return make_result(y, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(y, xs, back)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("stack needs at least one tensor")
    try:
        y = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_result(y, xs, back)


def getitem(x, index) -> Tensor:
    """Basic or advanced indexing; the adjoint scatter-adds into zeros."""
    x = as_tensor(x)
    y = x.data[index]
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_result(np.array(y, copy=True), (x,), back)


# --------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]})")
    ad, bd = a.data, b.data

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return make_result(np.matmul(ad, bd), (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [B, Din], weight [Dout, Din]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("linear expects x [B, Din] and weight [Dout, Din]")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input dim 1 is {x.shape[1]} but weight expects {weight.shape[1]}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is None:
        return make_result(y, (x, weight), lambda g: (g @ wd, g.T @ xd))
    bias = as_tensor(bias)
    if bias.shape != (wd.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({wd.shape[0]},)")
    return make_result(y + bias.data, (x, weight, bias),
                       lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


# ---------------------------------------------------------------- convolution

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via an explicit column buffer.

    x: [B, Cin, H, W]; weight: [Cout, Cin, kh, kw]; bias: [Cout].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 [B,C,H,W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be rank 4, got shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be positive and padding non-negative")
    B, C, H, W = x.shape
    O, C2, kh, kw = weight.shape
    if C != C2:
        raise ShapeError(f"conv2d: input channel dim (dim 1) is {C} but weight expects {C2}")
    if kh > H + 2 * padding:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {H + 2 * padding}")
    if kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {W + 2 * padding}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(B, C * kh * kw, Ho * Wo)
    wm = weight.data.reshape(O, -1)
    y = np.matmul(wm, cols)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
        y += bias.data[None, :, None]
        inputs.append(bias)
    y = y.reshape(B, O, Ho, Wo)
    padded_shape = xp.shape

    def back(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.T, g2).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(y, inputs, back)


def maxpool2d(x, k: int, stride: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    stride = stride or k
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be rank 4, got shape {x.shape}")
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ShapeError(f"maxpool2d: window {k} larger than input {H}x{W}")
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    win = np.empty((k * k, B, C, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            win[i * k + j] = x.data[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    arg = win.argmax(axis=0)
    y = np.take_along_axis(win, arg[None], axis=0)[0]

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                sel = arg == i * k + j
                gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += np.where(sel, g, 0)
        return (gx,)

    return make_result(y, (x,), back)


def global_avg_pool(x) -> Tensor:
    """[B, C, H, W] -> [B, C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be rank 4, got shape {x.shape}")
    B, C, H, W = x.shape
    scale = 1.0 / (H * W)
    return make_result(x.data.mean(axis=(2, 3)), (x,),
                       lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),))


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: input must be rank 4, got shape {x.shape}")
    B, C, H, W = x.shape
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return make_result(y, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


# -------------------------------------------------------------- normalization

def l2_normalize(x, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """Scale each vector along ``axis`` to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise DegenerateEmbeddingError("cannot normalize a vector with (near-)zero norm")
    y = x.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(y, (x,), back)
