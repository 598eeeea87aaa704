"""Differentiable operators over :class:`Tensor`.

Only the operator set needed by the SELCNN + Bi-LSTM model is provided.
Elementwise binary ops follow numpy broadcasting and reduce gradients back
to each operand's shape.
"""

from __future__ import annotations

import warnings
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


class DegenerateInputWarning(RuntimeWarning):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        scale = np.asarray(b, dtype=a.dtype)
        if scale.ndim == 0:
            return make_result(a.data * scale, (a,), lambda g: (g * scale,))
        b = Tensor(scale)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        ax = tuple(a % len(shape) for a in ax)
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    out = x.data.sum(axis=axis)
    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g) if _has_advanced(idx) else out.__setitem__(idx, g)
        return (out,)

    return make_result(np.asarray(x.data[idx]), (x,), backward)


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1 - y * y),))


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# dense layers and reductions


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out.reshape(lead + (wd.shape[0],)), parents, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with equal leading dims."""
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        if gb is not None and gb.shape != bd.shape:
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), backward)


def mean_over_axis(x: Tensor, axis, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over ``axis``; with ``mask`` only positions where mask is 1 count.

    ``mask`` is a constant array broadcastable against ``x``.  A slice with
    no valid positions raises.
    """
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if mask is None:
        count = np.prod([x.shape[a] for a in axes])
        out = x.data.mean(axis=axes)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / np.asarray(count, x.dtype),)

        return make_result(out.astype(x.dtype), (x,), backward)

    m = np.broadcast_to(np.asarray(mask, dtype=x.dtype), x.shape)
    count = m.sum(axis=axes)
    if np.any(count == 0):
        raise ValueError("mean_over_axis: a slice has no valid (unmasked) positions")
    out = (x.data * m).sum(axis=axes) / count

    def backward(g):
        return ((np.expand_dims(g / count, axes) * m).astype(x.dtype),)

    return make_result(out.astype(x.dtype), (x,), backward)


def min_over_axis(x: Tensor, axis: int, mask: Optional[np.ndarray] = None):
    """Minimum along ``axis``; gradient goes to the (first) argmin only.

    Masked-out positions never win.  Returns ``(values, argmin)``.
    """
    xd = x.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if np.any(~m.any(axis=axis)):
            raise ValueError("min_over_axis: a slice has no valid (unmasked) positions")
        xd = np.where(m, xd, np.inf)
    arg = np.argmin(xd, axis=axis)
    vals = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return make_result(vals, (x,), backward), arg


def take_along_axis(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Select one position per slice along ``axis`` (``idx`` has that axis removed)."""
    e = np.expand_dims(idx, axis)
    vals = np.take_along_axis(x.data, e, axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, e, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return make_result(vals, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12, warn: bool = True) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``.

    A zero vector maps to the zero vector with a DegenerateInputWarning
    (suppressed with ``warn=False`` where zero rows are expected padding).
    """
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clipped = norm <= eps
    if warn and np.any(norm == 0):
        warnings.warn("l2_normalize received a zero vector", DegenerateInputWarning, stacklevel=2)
    denom = np.where(clipped, eps, norm).astype(xd.dtype)
    y = xd / denom

    def backward(g):
        # d(x/|x|) = (g - y <g, y>) / |x| on the unclipped branch
        proj = (g * y).sum(axis=axis, keepdims=True)
        gx = np.where(clipped, g / denom, (g - y * proj) / denom)
        return (gx.astype(xd.dtype),)

    return make_result(y, (x,), backward)


def cosine(x: Tensor, classes: Tensor, warn: bool = True) -> Tensor:
    """Cosine similarity of every row vector of ``x`` [..., E] against ``classes`` [K, E]."""
    xn = l2_normalize(x, axis=-1, warn=warn)
    cn = l2_normalize(classes, axis=-1)
    return linear(xn, cn)


# ---------------------------------------------------------------------------
# convolutional building blocks


def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
           name: str = "conv2d") -> Tensor:
    """Cross-correlation of ``x`` [B, C, T, F] with ``weight`` [Cout, Cin, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"{name}: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, T, F = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != C:
        raise ValueError(f"{name}: input has {C} channels but weight expects {cin}")
    st, sf = _pair(stride)
    pt, pf = _pair(padding)
    if min(st, sf) < 1 or min(pt, pf) < 0:
        raise ValueError(f"{name}: invalid stride {stride} or padding {padding}")
    To = (T + 2 * pt - kh) // st + 1
    Fo = (F + 2 * pf - kw) // sf + 1
    if To < 1 or Fo < 1:
        raise ValueError(f"{name}: input {x.shape} too small for kernel {kh}x{kw}")

    xd, wd = x.data, weight.data
    wm = wd.reshape(cout, -1)
    if kh == 1 and kw == 1 and st == 1 and sf == 1 and pt == 0 and pf == 0:
        cols = np.ascontiguousarray(xd.transpose(0, 2, 3, 1)).reshape(-1, C)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (pf, pf))) if (pt or pf) else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::st, ::sf][:, :, :To, :Fo]
        # [B, To, Fo, C, kh, kw] flattened to rows of C*kh*kw
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, C * kh * kw)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    # logical [B, Cout, To, Fo] view over channels-last memory; the next
    # conv's im2col and this op's backward both read it without a copy
    out = out.reshape(B, To, Fo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(wd.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = gm @ wm
            if kh == 1 and kw == 1 and st == 1 and sf == 1 and pt == 0 and pf == 0:
                gx = gcols.reshape(B, T, F, C).transpose(0, 3, 1, 2)
            else:
                gcols = gcols.reshape(B, To, Fo, C, kh, kw)
                gxp = np.zeros((B, C, T + 2 * pt, F + 2 * pf), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + st * To:st, j:j + sf * Fo:sf] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pt:pt + T, pf:pf + F]
        if bias is not None:
            return gx, gw, gb
        return gx, gw

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward)


def max_feature_map(x: Tensor) -> Tensor:
    """Channel-halving max; ties go to the first half."""
    c2 = x.shape[1]
    if c2 % 2:
        raise ValueError(f"max_feature_map needs an even channel count, got {c2}")
    c = c2 // 2
    a, b = x.data[:, :c], x.data[:, c:]
    first = a >= b
    out = np.maximum(a, b)

    def backward(g):
        win = g * first
        return (np.concatenate([win, g - win], axis=1),)

    return make_result(out, (x,), backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    The gradient goes to the window's maximum; ties go to the lowest linear
    index within the window.
    """
    B, C, T, F = x.shape
    T2, F2 = T // 2, F // 2
    if T2 < 1 or F2 < 1:
        raise ValueError(f"maxpool2d: input {x.shape} smaller than the 2x2 window")
    xd = x.data
    offsets = ((0, 0), (0, 1), (1, 0), (1, 1))
    views = [xd[:, :, i:2 * T2:2, j:2 * F2:2] for i, j in offsets]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def backward(g):
        gx = np.zeros_like(xd)
        free = np.ones(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            win = (v == out) & free
            gx[:, :, i:2 * T2:2, j:2 * F2:2] = g * win
            free &= ~win
        return (gx,)

    return make_result(out, (x,), backward)


class RunningStats:
    """Per-channel running mean/variance for batch normalisation."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool,
                 eps: float = 1e-5, mask: Optional[np.ndarray] = None) -> Tensor:
    """Batch norm over (B, T, F) per channel.

    In training mode the batch statistics are computed over positions where
    ``mask`` (broadcastable to ``x``) is 1, and the running statistics are
    updated with the unbiased variance.  In eval mode the running statistics
    are used and the op is a fixed per-channel affine map.
    """
    xd = x.data
    C = xd.shape[1]
    shp = (1, C, 1, 1)
    axes = (0, 2, 3)
    if training:
        if mask is None:
            m = None
            n = xd.size // C
            mu = xd.mean(axis=axes)
            var = ((xd - mu.reshape(shp)) ** 2).mean(axis=axes)
        else:
            m = np.broadcast_to(np.asarray(mask, dtype=xd.dtype), xd.shape)
            n = int(m[:, 0].sum())
            mu = (xd * m).sum(axis=axes) / n
            var = (((xd - mu.reshape(shp)) ** 2) * m).sum(axis=axes) / n
        mom = stats.momentum
        unbiased = var * n / max(n - 1, 1)
        stats.mean[...] = (1 - mom) * stats.mean + mom * mu
        stats.var[...] = (1 - mom) * stats.var + mom * unbiased
    else:
        m = None
        mu, var = stats.mean, stats.var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(shp)) * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shp)
            gx = gxhat * inv.reshape(shp)
            if training:
                # statistics depend only on the valid positions
                s1 = gxhat.sum(axis=axes)
                s2 = (gxhat * xhat).sum(axis=axes)
                corr = (s1.reshape(shp) + xhat * s2.reshape(shp)) * (inv.reshape(shp) / n)
                gx = gx - (corr if m is None else corr * m)
            gx = gx.astype(xd.dtype)
        return gx, gg, gbeta

    return make_result(out.astype(xd.dtype), (x, gamma, beta), backward)
