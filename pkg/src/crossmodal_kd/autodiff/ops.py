"""Differentiable operation catalog.

Each function takes Tensors (or array-likes, which become constants),
computes the forward value with numpy and registers a backward closure.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import DomainError, ShapeError, Tensor, as_tensor, unbroadcast

LN_EPS = 1e-5


def _broadcast_shape(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: zero divisor")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return Tensor._make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be positive")
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return Tensor._make(x * cdf, (a,), backward, "gelu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if p != int(p) and np.any(x < 0):
        raise DomainError("power: fractional power of negative value")
    return Tensor._make(x ** p, (a,), lambda g: (g * p * x ** (p - 1),), "power")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    return Tensor._make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


_UNARY = {"exp": exp, "log": log, "neg": neg, "relu": relu, "sigmoid": sigmoid, "gelu": gelu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name over the elementwise catalog."""
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op '{op}'")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def weighted_sum(a, w) -> Tensor:
    """sum(a * w) for a constant array ``w``, as one graph node.

    The gradient-check harness reduces outputs with it so that a corrupted
    ``mul`` or ``sum`` does not leak into the checks of other ops.
    """
    a = as_tensor(a)
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), a.shape)
    return Tensor._make(np.asarray(float(np.sum(a.data * w))), (a,), lambda g: (g * w,), "weighted_sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return Tensor._make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from exc
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    # the swap is its own inverse
    return Tensor._make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(np.array(a.data[idx]), (a,), backward, "index")


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        # move the gathered axes to the front so add.at indexes one axis
        g_front = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        out_front = np.moveaxis(out, axis, 0)
        np.add.at(out_front, indices, g_front)
        return (out,)

    return Tensor._make(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor._make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._make(out, ts, backward, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dims broadcast (batched matmul)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from exc

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return Tensor._make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias, weight stored as (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# convolution (cross-correlation, no kernel flip)
# ---------------------------------------------------------------------------

def conv1d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError("conv1d expects x (B, C_in, L) and kernel (C_out, C_in, k)")
    B, cin, L = x.shape
    cout, kcin, k = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv1d: kernel expects {kcin} input channels, got {cin}")
    if stride < 1:
        raise ShapeError("conv1d: stride must be >= 1")
    if k > L + 2 * padding:
        raise ShapeError(f"conv1d: kernel {k} larger than padded input {L + 2 * padding}")
    lout = (L + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    # cols[b, c, j, l] = xp[b, c, l*stride + j]
    cols = np.stack([xp[:, :, j:j + stride * (lout - 1) + 1:stride] for j in range(k)], axis=2)
    w2 = kernel.data.reshape(cout, cin * k)
    flat = cols.transpose(0, 3, 1, 2).reshape(B * lout, cin * k)
    out = (flat @ w2.T).reshape(B, lout, cout).transpose(0, 2, 1)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(B * lout, cout)
        gw = (g2.T @ flat).reshape(cout, cin, k)
        gflat = (g2 @ w2).reshape(B, lout, cin, k)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + stride * (lout - 1) + 1:stride] += gflat[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding:padding + L]
        return gx, gw

    res = Tensor._make(np.ascontiguousarray(out), (x, kernel), backward, "conv1d")
    if bias is not None:
        res = add(res, reshape(bias, (1, cout, 1)))
    return res


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects x (B, C_in, H, W) and kernel (C_out, C_in, kh, kw)")
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel expects {kcin} input channels, got {cin}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    # channel-last padded copy so the im2col rows come out contiguous
    xp = np.zeros((B, H + 2 * padding, W + 2 * padding, cin))
    xp[:, padding:padding + H, padding:padding + W] = x.data.transpose(0, 2, 3, 1)
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    # win[b, y, x, c, i, j] = xp[b, y*stride + i, x*stride + j, c]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, :he:stride, :we:stride]
    flat = win.reshape(B * ho * wo, cin * kh * kw)
    w2 = kernel.data.reshape(cout, cin * kh * kw)
    out = (flat @ w2.T).reshape(B, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, cout)
        gw = (g2.T @ flat).reshape(cout, cin, kh, kw)
        gcols = (g2 @ w2).reshape(B, ho, wo, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + he:stride, j:j + we:stride] += gcols[..., i, j]
        return gxp[:, padding:padding + H, padding:padding + W].transpose(0, 3, 1, 2), gw

    res = Tensor._make(np.ascontiguousarray(out), (x, kernel), backward, "conv2d")
    if bias is not None:
        res = add(res, reshape(bias, (1, cout, 1, 1)))
    return res


# ---------------------------------------------------------------------------
# normalisation, attention helpers, losses
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def layer_norm(x, gain=None, bias=None, axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalise along ``axis`` to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = Tensor._make(xhat, (x,), backward, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: 0.5 d^2/beta inside |d| < beta, |d| - beta/2 outside."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: shapes differ {pred.shape} vs {target.shape}")
    if beta <= 0:
        raise ValueError("smooth_l1: beta must be positive")
    d = pred.data - target.data
    ad = np.abs(d)
    inside = ad < beta
    n = d.size
    val = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta).mean()

    def backward(g):
        gd = g * np.where(inside, d / beta, np.sign(d)) / n
        return gd, -gd

    return Tensor._make(np.array(val), (pred, target), backward, "smooth_l1")


def dropout(x, rate: float, rng: Optional[np.random.Generator], training: bool, mask=None) -> Tensor:
    """Inverted dropout.  ``mask`` may be supplied to make the op deterministic."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if mask is None:
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
