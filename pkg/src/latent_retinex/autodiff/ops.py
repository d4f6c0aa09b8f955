"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects (plain numbers and
arrays are accepted where noted) and records a backward rule on the active
tape when any input is tracked. Layouts follow the usual NCHW convention for
image-like tensors.
"""

from __future__ import annotations

import math
from numbers import Number
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Tensor, active_tape

Axis = Union[None, int, Tuple[int, ...]]


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.record(out, inputs, backward)
    return out


def _coerce(a, like=None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if isinstance(like, Tensor) and isinstance(a, Number) else None
    return Tensor(np.asarray(a, dtype=dtype))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    return _coerce(a, b), _coerce(b, a)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _norm_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand(g: np.ndarray, axes: Tuple[int, ...], shape, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def pow(x: Tensor, exponent: float) -> Tensor:
    """``x ** exponent`` for a scalar exponent.

    For exponents below one the derivative at exactly zero is taken as zero
    instead of infinity.
    """
    x = _coerce(x)
    p = float(exponent)
    out = np.power(x.data, p)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x.data, p - 1.0)
        if p < 1.0:
            d = np.where(x.data == 0, 0.0, d)
        return (g * d,)

    return _result(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g / (2.0 * out),))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _result(out, (x,), backward)


def softplus(x: Tensor, beta: float = 1.0) -> Tensor:
    """``log(1 + exp(beta*x)) / beta``, evaluated without overflow."""
    z = beta * x.data
    out = (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) / beta
    return _result(out, (x,), lambda g: (g * _sigmoid(z),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _result(out, (x,), lambda g: (_expand(g, axes, x.shape, keepdims),))


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _result(out, (x,), lambda g: (_expand(g / n, axes, x.shape, keepdims),))


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), backward)


def rms(x: Tensor, axis: Axis = None) -> Tensor:
    """Root of the mean of squares over ``axis``; gradient is zero where the norm is zero."""
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    out = np.sqrt(np.mean(x.data * x.data, axis=axes))

    def backward(g):
        r = np.expand_dims(out, axes)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(r > 0, np.expand_dims(g, axes) / (n * r), 0.0)
        return (x.data * scale,)

    return _result(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)


def index(x: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:  # no repeated positions, plain assignment is enough
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(_coerce(t) for t in tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise DimensionError(f"concat: cannot join shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        g = np.ascontiguousarray(g)
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def layer_norm(x: Tensor, axis: Axis = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation over ``axis`` (no affine part)."""
    axes = _norm_axes(axis, x.ndim)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result(xhat, (x,), backward)


def attention(query: Tensor, key: Tensor, value: Tensor) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(D)) v`` over the last two axes."""
    if query.ndim < 2 or key.ndim < 2 or value.ndim < 2:
        raise DimensionError(
            f"attention: need [..., S, D] operands, got {query.shape}, {key.shape}, {value.shape}"
        )
    if query.shape[-1] != key.shape[-1]:
        raise DimensionError(f"attention: query {query.shape} and key {key.shape} differ in D")
    if key.shape[-2] != value.shape[-2]:
        raise DimensionError(f"attention: key {key.shape} and value {value.shape} differ in S")
    scale = 1.0 / math.sqrt(query.shape[-1])
    scores = matmul(query, transpose_last(key)) * scale
    return matmul(softmax(scores, axis=-1), value)


def transpose_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW)
# ---------------------------------------------------------------------------

def _require_4d(name: str, x: Tensor):
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected a 4-D NCHW tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    _require_4d("conv2d", x)
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [Co,Ci,kh,kw], got {weight.shape}")
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise DimensionError(
            f"conv2d: input {x.shape} has {ci} channels but kernel {weight.shape} expects {wci}"
        )
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {weight.shape} larger than padded input {x.shape} (padding {padding})"
        )
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match kernel {weight.shape}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # columns laid out as (Ci*kh*kw, N*Ho*Wo) so copies run along image rows
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(ci * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(co, -1)
    out2d = wmat @ cols
    if bias is not None:
        out2d += bias.data[:, None]
    out = np.ascontiguousarray(out2d.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(ci, kh, kw, n, ho, wo)
            gxp = np.zeros((ci, n, hp, wp), dtype=g.dtype)
            hs = stride * (ho - 1) + 1
            ws = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, backward)


def max_pool2d(x: Tensor, k: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties route the gradient to the first maximum in row-major order."""
    _require_4d("max_pool2d", x)
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k == stride:
        if h % k or w % k:
            raise DimensionError(f"max_pool2d: extent {x.shape} not divisible by window {k}")
        ho, wo = h // k, w // k
        blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        arg = np.argmax(blocks, axis=-1)[..., None]
        out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

        def backward(g):
            gb = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
            np.put_along_axis(gb, arg, g[..., None], axis=-1)
            return (gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

        return _result(out, (x,), backward)

    if k > h or k > w:
        raise DimensionError(f"max_pool2d: window {k} larger than input {x.shape}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_general(g):
        gx = np.zeros_like(x.data)
        nn_, cc, oi, oj = np.indices(arg.shape)
        rows = oi * stride + arg // k
        cols = oj * stride + arg % k
        np.add.at(gx, (nn_, cc, rows, cols), g)
        return (gx,)

    return _result(out, (x,), backward_general)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    _require_4d("upsample_nearest", x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


def _forward_diff(x: Tensor, axis: int) -> Tensor:
    out = np.zeros_like(x.data)
    lead = [slice(None)] * x.ndim
    hi, lo = list(lead), list(lead)
    hi[axis], lo[axis] = slice(1, None), slice(None, -1)
    out[tuple(lo)] = x.data[tuple(hi)] - x.data[tuple(lo)]

    def backward(g):
        gm = g.copy()
        last = list(lead)
        last[axis] = -1
        gm[tuple(last)] = 0.0
        gx = -gm
        gx[tuple(hi)] += gm[tuple(lo)]
        return (gx,)

    return _result(out, (x,), backward)


def diff_x(x: Tensor) -> Tensor:
    """Horizontal forward difference; the last column is replicate-padded (zero difference)."""
    return _forward_diff(x, x.ndim - 1)


def diff_y(x: Tensor) -> Tensor:
    """Vertical forward difference; the last row is replicate-padded (zero difference)."""
    return _forward_diff(x, x.ndim - 2)
