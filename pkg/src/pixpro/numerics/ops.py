"""Differentiable operations on :class:`~pixpro.numerics.tensor.Tensor`.

Every op computes its forward value with numpy and records a closure that maps
the output gradient to one gradient per input (``None`` for inputs that do not
need one). Broadcasting is supported by the elementwise ops; gradients are
summed back to the input shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor

COS_EPS = 1e-12


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(x, dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return Tensor._make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = float(exponent)
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; the gradient is zero wherever the clamp is active."""
    mask = a.data > lo
    return Tensor._make(np.where(mask, a.data, lo).astype(a.dtype), (a,),
                        lambda g: (g * mask,), "clamp_min")


def clamped_power(a: Tensor, gamma: float) -> Tensor:
    """``max(a, 0) ** gamma`` with a zero gradient on the clamped side.

    Fused so that fractional exponents never evaluate ``0 ** (gamma - 1)``.
    """
    gamma = float(gamma)
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    pos = a.data > 0
    base = np.where(pos, a.data, 0.0).astype(a.dtype)
    out = base ** gamma

    def backward(g):
        safe = np.where(pos, base, 1.0)
        return (np.where(pos, g * gamma * safe ** (gamma - 1.0), 0.0).astype(g.dtype),)

    return Tensor._make(out, (a,), backward, "clamped_power")


def unit_clip(a: Tensor) -> Tensor:
    """Clip into [-1, 1] to absorb rounding; gradient passes straight through."""
    return Tensor._make(np.clip(a.data, -1.0, 1.0), (a,), lambda g: (g,), "unit_clip")


# -- reductions and shape ----------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,),
                        lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tuple(tensors), backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def masked_logsumexp(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """log(sum(exp(a) over entries where ``mask``)) along ``axis``.

    Slices with an empty mask produce 0 and receive no gradient; callers
    are expected to drop them from any average.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    any_ = mask.any(axis=axis, keepdims=True)
    masked = np.where(mask, a.data, -np.inf)
    m = np.where(any_, masked.max(axis=axis, keepdims=True), 0.0)
    e = np.where(mask, np.exp(a.data - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    s_safe = np.where(any_, s, 1.0)
    out = np.where(any_, m + np.log(s_safe), 0.0).astype(a.dtype)

    def backward(g):
        g = np.expand_dims(g, axis)
        return ((g * e / s_safe).astype(a.dtype),)

    return Tensor._make(np.squeeze(out, axis=axis), (a,), backward, "masked_logsumexp")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    return masked_logsumexp(a, np.ones(a.shape, dtype=bool), axis=axis)


# -- normalisation and similarity ----------------------------------------------

def l2_normalize(a: Tensor, axis: int = -1, eps: float = COS_EPS) -> Tensor:
    """``a / max(||a||, eps)`` along ``axis``.

    Below ``eps`` the denominator is a constant, so its gradient is dropped.
    """
    ad = a.data
    norm = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = ad / denom

    def backward(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / denom).astype(g.dtype),)

    return Tensor._make(out, (a,), backward, "l2_normalize")


def cosine_similarity_matrix(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise cosine similarities between the rows of ``x`` [..., N, d] and ``y`` [..., M, d]."""
    if x.shape[-1] != y.shape[-1] or x.ndim != y.ndim:
        raise ValueError(f"cosine_similarity_matrix: incompatible shapes {x.shape} and {y.shape}")
    xn = l2_normalize(x, axis=-1)
    yn = l2_normalize(y, axis=-1)
    return unit_clip(matmul(xn, transpose_last(yn)))


def transpose_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


# -- convolution ---------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # [N, C, Ho, Wo, kh, kw] -> [N, Ho, Wo, C, kh, kw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``kernel`` [K,C,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    n, c, h, w = x.shape
    k, _, kh, kw = kernel.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"conv2d: kernel shape {kernel.shape} larger than padded input shape {x.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    wmat = kernel.data.reshape(k, -1)

    if kh == 1 and kw == 1 and pad == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = gm @ wmat
            if kh == 1 and kw == 1 and pad == 0:
                gsub = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = gsub
                else:
                    gx = np.ascontiguousarray(gsub)
            else:
                dcols = dcols.reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward, "upsample_nearest")


# -- batch normalisation ------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation for [N,C] or [N,C,H,W] inputs.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode only the running statistics are used.
    """
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batch_norm: input shape {x.shape} does not match {gamma.shape[0]} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    m = x.size // x.shape[1]
    xd = x.data

    if training:
        mu = xd.mean(axis=axes)
        xc = xd - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * m / max(m - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        if np.any(running_var <= 0):
            raise ValueError("batch_norm: running variance must be strictly positive in eval mode")
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
        xc = xd - mu.reshape(bshape)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gd
        if training:
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward, "batch_norm")
