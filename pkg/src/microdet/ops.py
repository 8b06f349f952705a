"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new :class:`Tensor` recorded on the tape. Constants are cast to the dtype of
the tensor operand so float32 graphs stay float32.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Tensor

# -- MAC accounting -----------------------------------------------------------

_MAC_COUNTERS: list = []


class count_macs:
    """Context manager that tallies multiply-accumulates of conv2d and matmul.

    >>> with count_macs() as c:
    ...     model(x)
    >>> c.total
    """

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _MAC_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _MAC_COUNTERS.remove(self)
        return False


def _tally(n: int) -> None:
    for c in _MAC_COUNTERS:
        c.total += int(n)


# -- helpers ------------------------------------------------------------------

def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x), dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for a tensor of rank {ndim}")
    return axis % ndim


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {sa} with {sb}") from e

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return Tensor._make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {sa} with {sb}") from e

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return Tensor._make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    try:
        out = ad * bd
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    try:
        out = ad / bd
    except ValueError as e:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad ** p

    def backward(g):
        return (g * p * ad ** (p - 1),)

    return Tensor._make(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Square root whose derivative is taken as 0 where the input is <= eps."""
    ad = a.data
    out = np.sqrt(np.maximum(ad, 0.0))

    def backward(g):
        safe = ad > eps
        return (np.where(safe, g * 0.5 / np.where(safe, out, 1.0), 0.0).astype(ad.dtype),)

    return Tensor._make(out, (a,), backward, "sqrt")


def arctan(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.arctan(ad), (a,), lambda g: (g / (1.0 + ad * ad),), "arctan")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    out = ad * s

    def backward(g):
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return Tensor._make(out, (a,), backward, "silu")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return Tensor._make(ad * mask, (a,), lambda g: (g * mask,), "relu")


_ACTIVATIONS = {"silu": silu, "sigmoid": sigmoid, "relu": relu}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(out, (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g):
        return unbroadcast(g * pick_a, a.shape), unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(out, (a, b), backward, "minimum")


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        mask &= ad >= lo
    if hi is not None:
        mask &= ad <= hi
    return Tensor._make(out, (a,), lambda g: (g * mask,), "clamp")


# -- reductions and shape -------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (a,), backward, "sum")


def mean_over(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_norm_axis(ax, a.ndim) for ax in axes)
        axis = axes
        count = int(np.prod([shape[ax] for ax in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(a.dtype),)

    return Tensor._make(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from e
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(_norm_axis(ax, a.ndim) for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return Tensor._make(out, (a,), lambda g: (g.transpose(inv),), "permute")


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(out, (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    axis = _norm_axis(axis, nd)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {ref} vs {t.shape}")
        for d in range(nd):
            if d != axis and t.shape[d] != ref[d]:
                raise ShapeError(f"concat: dimension {d} mismatch ({ref[d]} vs {t.shape[d]}) along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list:
    axis = _norm_axis(axis, a.ndim)
    if builtins.sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not add up to dimension {axis} of size {a.shape[axis]}")
    outs = []
    start = 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + s)
        outs.append(_slice(a, tuple(sl)))
        start += s
    return outs


def _slice(a: Tensor, sl: tuple) -> Tensor:
    out = a.data[sl]
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[sl] = g
        return (full,)

    return Tensor._make(out, (a,), backward, "slice")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({ad.shape[-1]} vs {bd.shape[-2]})")
    out = ad @ bd
    _tally(out.size * ad.shape[-1])

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    if gamma.shape != (xd.shape[-1],) or beta.shape != (xd.shape[-1],):
        raise ShapeError(f"layer_norm: affine params must have shape ({xd.shape[-1]},)")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


# -- convolution family ---------------------------------------------------------

def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW kernels."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got rank {x.ndim}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be OIHW, got rank {w.ndim}")
    if stride < 1 or pad < 0 or groups < 1:
        raise ShapeError(f"conv2d: need stride >= 1, pad >= 0, groups >= 1 (got {stride}, {pad}, {groups})")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c % groups:
        raise ShapeError(f"conv2d: input channels C_in={c} not divisible by groups={groups}")
    if o % groups:
        raise ShapeError(f"conv2d: output channels O={o} not divisible by groups={groups}")
    if ci != c // groups:
        raise ShapeError(f"conv2d: kernel I dimension is {ci}, expected C_in/groups = {c // groups}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match O={o}")
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size ({ho}, {wo}) for input {h}x{wd}, kernel {kh}x{kw}")
    _tally(n * o * ho * wo * ci * kh * kw)

    if groups == 1:
        return _conv_dense(x, w, b, stride, pad, ho, wo)
    if ci == 1:
        return _conv_depthwise(x, w, b, stride, pad, ho, wo, groups)
    return _conv_grouped(x, w, b, stride, pad, groups)


def _pad(xd, pad):
    if pad == 0:
        return xd
    return np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_dense(x, w, b, stride, pad, ho, wo):
    xd, wdat = x.data, w.data
    n, c, h, wid = xd.shape
    o, _, kh, kw = wdat.shape
    wm = wdat.reshape(o, -1)
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = xd.reshape(n, c, h * wid)
        xp_shape = None
    else:
        xp = _pad(xd, pad)
        xp_shape = xp.shape
        cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = gb = gx = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wdat.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wm.T, g2)
            if xp_shape is None:
                gx = dcols.reshape(xd.shape)
            else:
                gxp = kernels.col2im(dcols, xp_shape, kh, kw, stride, ho, wo)
                gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, backward, "conv2d")


def _conv_depthwise(x, w, b, stride, pad, ho, wo, groups):
    # one input channel per group; each group may emit several outputs
    xd, wdat = x.data, w.data
    n, c, h, wid = xd.shape
    o, _, kh, kw = wdat.shape
    mult = o // groups
    src = np.repeat(np.arange(c), mult) if mult > 1 else None
    xp = _pad(xd, pad)
    xr = xp[:, src] if src is not None else xp
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(xd, wdat))
    span_y, span_x = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out += xr[:, :, i : i + span_y : stride, j : j + span_x : stride] * wdat[:, 0, i, j][None, :, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        gw = np.zeros_like(wdat) if w.requires_grad else None
        gxr = np.zeros(xr.shape, dtype=g.dtype) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                win = xr[:, :, i : i + span_y : stride, j : j + span_x : stride]
                if gw is not None:
                    gw[:, 0, i, j] = (g * win).sum(axis=(0, 2, 3))
                if gxr is not None:
                    gxr[:, :, i : i + span_y : stride, j : j + span_x : stride] += g * wdat[:, 0, i, j][None, :, None, None]
        gx = None
        if gxr is not None:
            if src is not None:
                gxr = gxr.reshape(n, c, mult, *gxr.shape[2:]).sum(axis=2)
            gx = gxr[:, :, pad : pad + h, pad : pad + wid] if pad else gxr
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(out, parents, backward, "conv2d_dw")


def _conv_grouped(x, w, b, stride, pad, groups):
    c = x.shape[1]
    o = w.shape[0]
    cg, og = c // groups, o // groups
    xs = split(x, [cg] * groups, axis=1)
    ws = split(w, [og] * groups, axis=0)
    outs = [_conv_dense(xi, wi, None, stride, pad,
                        conv_out_size(x.shape[2], w.shape[2], stride, pad),
                        conv_out_size(x.shape[3], w.shape[3], stride, pad))
            for xi, wi in zip(xs, ws)]
    out = concat(outs, axis=1)
    if b is not None:
        out = add(out, reshape(b, (1, o, 1, 1)))
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, training: bool = True, momentum: float = 0.1) -> Tensor:
    """Per-channel normalisation of an NCHW map.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, as is conventional).
    """
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    xd = x.data
    c = xd.shape[1]
    for name, t in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm: {name} has shape {t.shape}, expected ({c},) to match channel dimension")
    axes = (0, 2, 3)
    gd = gamma.data[None, :, None, None]
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)[None, :, None, None]
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            dx = (gd * inv / m) * (m * g - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
        else:
            dx = g * gd * inv
        return dx, dgamma, dbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batch_norm")


def max_pool2d(x: Tensor, k: int, stride: Optional[int] = None, pad: int = 0) -> Tensor:
    """Max pooling with -inf padding. Ties go to the lowest linear index."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be NCHW, got rank {x.ndim}")
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"max_pool2d: non-positive output size ({ho}, {wo})")
    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    out, flat = kernels.maxpool_forward(np.ascontiguousarray(xp), k, stride, ho, wo)
    xp_shape = xp.shape

    def backward(g):
        gxp = kernels.maxpool_backward(np.ascontiguousarray(g), flat, xp_shape)
        return (gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp,)

    return Tensor._make(out, (x,), backward, "max_pool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: input must be NCHW, got rank {x.ndim}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward, "upsample")


# -- losses -------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on logits against a constant target array."""
    xd = logits.data
    t = np.asarray(target, dtype=xd.dtype)
    if t.shape != xd.shape:
        t = np.broadcast_to(t, xd.shape)
    elem = np.maximum(xd, 0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
    if reduction == "mean":
        out = np.asarray(elem.mean(), dtype=xd.dtype)
        scale = 1.0 / max(xd.size, 1)
    elif reduction == "sum":
        out = np.asarray(elem.sum(), dtype=xd.dtype)
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        return ((_sigmoid(xd) - t) * (g * scale),)

    return Tensor._make(out, (logits,), backward, "bce_with_logits")


__all__ = [
    "count_macs", "unbroadcast", "add", "sub", "mul", "div", "power", "exp", "log", "sqrt", "arctan",
    "sigmoid", "silu", "relu", "activation", "maximum", "minimum", "clamp", "sum", "mean_over",
    "reshape", "permute", "index", "concat", "split", "matmul", "softmax", "layer_norm", "conv2d",
    "batch_norm", "max_pool2d", "upsample_nearest", "bce_with_logits", "conv_out_size",
]
