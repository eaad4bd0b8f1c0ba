"""Differentiable layer primitives: convolution, normalization, pooling, activations."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DiffArray, ShapeError, as_diff, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- activations -------------------------------------------------------------------

def leaky_relu(x, slope: float = 0.0) -> DiffArray:
    """Elementwise ``max(x, slope * x)``; the derivative at 0 is ``slope``."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    x = as_diff(x)
    positive = x.data > 0
    if slope == 0.0:
        out = np.maximum(x.data, 0.0)
    else:
        out = np.where(positive, x.data, slope * x.data)

    def backward(g):
        if slope == 0.0:
            return (g * positive,)
        return (np.where(positive, g, slope * g),)

    return make_result(out, (x,), backward, "leaky_relu")


def relu(x) -> DiffArray:
    return leaky_relu(x, 0.0)


def sigmoid(x) -> DiffArray:
    x = as_diff(x)
    # split by sign to avoid overflow in exp
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x, axis: int = -1) -> DiffArray:
    x = as_diff(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> DiffArray:
    x = as_diff(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> DiffArray:
    x = as_diff(x)
    peak = x.data.max(axis=axis, keepdims=True)
    total = np.log(np.exp(x.data - peak).sum(axis=axis, keepdims=True)) + peak
    out = total if keepdims else np.squeeze(total, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x.data - total),)

    return make_result(out, (x,), backward, "logsumexp")


# -- affine maps ---------------------------------------------------------------------

def linear(x, weight, bias=None) -> DiffArray:
    """``x @ weight.T + bias`` for ``x`` of shape (N, Din) and ``weight`` (Dout, Din)."""
    x, weight = as_diff(x), as_diff(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_diff(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data if x.requires_grad else None,
                 g.T @ x.data if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, backward, "linear")


def conv2d(x, weight, bias=None, padding: int = 0, stride: int = 1) -> DiffArray:
    """2-D cross-correlation over NCHW input with a square (Cout, Cin, k, k) kernel."""
    x, weight = as_diff(x), as_diff(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} has {cin} channels, "
                         f"weight {weight.shape} expects {wcin}")
    if k != k2:
        raise ShapeError(f"conv2d needs a square kernel, got {weight.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k} larger than padded input {x.shape} (padding {padding})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    # cols[n] is the (cin*k*k, ho*wo) patch matrix of image n, rows ordered (cin, ki, kj)
    cols = np.empty((n, cin, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
    cols = cols.reshape(n, cin * k * k, ho * wo)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols)
    parents = [x, weight]
    if bias is not None:
        bias = as_diff(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias {bias.shape} does not match {cout} filters")
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        gm = g.reshape(n, cout, ho * wo)
        gx = gw = None
        if weight.requires_grad:
            acc = np.zeros((cout, cin * k * k), dtype=g.dtype)
            for b in range(n):
                acc += gm[b] @ cols[b].T
            gw = acc.reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm).reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return tuple(grads)

    return make_result(out, parents, backward, "conv2d")


# -- normalization -------------------------------------------------------------------

def batchnorm2d(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> DiffArray:
    """Per-channel batch normalization of NCHW input.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; in eval mode the running statistics
    are used.
    """
    x, gamma, beta = as_diff(x), as_diff(gamma), as_diff(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 1:
        raise ShapeError(f"batchnorm2d needs N*H*W >= 1, got {x.shape}")
    bshape = (1, -1, 1, 1)
    if training:
        mu = x.data.sum(axis=axes) / count
        centered = x.data - mu.reshape(bshape)
        var = np.einsum("nchw,nchw->c", centered, centered) / count
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * count / (count - 1) if count > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        centered = x.data - mu.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered
    xhat *= inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape)
    out += beta.data.reshape(bshape)

    def backward(g):
        ggamma = np.einsum("nchw,nchw->c", g, xhat)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std).reshape(bshape)
            if training:
                gx = xhat * (-ggamma / count).reshape(bshape)
                gx += g
                gx -= (gbeta / count).reshape(bshape)
                gx *= scale
            else:
                gx = scale * g
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


# -- pooling -------------------------------------------------------------------------

def _pool_windows(data: np.ndarray, window: int, stride: int):
    n, c, h, w = data.shape
    if h < window or w < window:
        raise ShapeError(f"pooling window {window} larger than input {data.shape}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    view = sliding_window_view(data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return view.reshape(n, c, ho, wo, window * window), ho, wo


def maxpool2d(x, window: int = 2, stride: Optional[int] = None) -> DiffArray:
    """Max pooling; gradient goes to the first maximal element of each window."""
    x = as_diff(x)
    stride = window if stride is None else stride
    if window == stride == 2:
        return _maxpool2x2(x)
    flat, ho, wo = _pool_windows(x.data, window, stride)
    # argmax returns the first maximum; window order is row-major, i.e. lowest linear index
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for idx in range(window * window):
            di, dj = divmod(idx, window)
            gx[:, :, di:di + hspan:stride, dj:dj + wspan:stride] += np.where(arg == idx, g, 0.0)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def _maxpool2x2(x: DiffArray) -> DiffArray:
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"pooling window 2 larger than input {x.shape}")
    ho, wo = h // 2, w // 2
    q0, q1, q2, q3 = (x.data[:, :, di:2 * ho:2, dj:2 * wo:2] for di in (0, 1) for dj in (0, 1))
    # ties resolve to the earlier quadrant in row-major window order (lowest linear index)
    top_right = q1 > q0
    bottom_right = q3 > q2
    top = np.maximum(q0, q1)
    bottom = np.maximum(q2, q3)
    use_bottom = bottom > top
    out = np.maximum(top, bottom)

    def backward(g):
        blocks = np.empty((n, c, ho, 2, wo, 2), dtype=g.dtype)
        g_top = np.where(use_bottom, 0.0, g)
        g_bottom = g - g_top
        np.multiply(g_top, top_right, out=blocks[:, :, :, 0, :, 1])
        np.subtract(g_top, blocks[:, :, :, 0, :, 1], out=blocks[:, :, :, 0, :, 0])
        np.multiply(g_bottom, bottom_right, out=blocks[:, :, :, 1, :, 1])
        np.subtract(g_bottom, blocks[:, :, :, 1, :, 1], out=blocks[:, :, :, 1, :, 0])
        blocks = blocks.reshape(n, c, 2 * ho, 2 * wo)
        if (2 * ho, 2 * wo) == (h, w):
            return (blocks,)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * ho, :2 * wo] = blocks
        return (gx,)

    return make_result(out, (x,), backward, "maxpool2d")


def avgpool2d(x, window: int = 2, stride: Optional[int] = None) -> DiffArray:
    x = as_diff(x)
    stride = window if stride is None else stride
    flat, ho, wo = _pool_windows(x.data, window, stride)
    out = flat.mean(axis=-1)
    area = float(window * window)

    def backward(g):
        gx = np.zeros_like(x.data)
        share = g / area
        hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for di in range(window):
            for dj in range(window):
                gx[:, :, di:di + hspan:stride, dj:dj + wspan:stride] += share
        return (gx,)

    return make_result(out, (x,), backward, "avgpool2d")


# -- similarity helpers -------------------------------------------------------------

def l2_normalize(x, axis: int = -1) -> DiffArray:
    """Scale vectors along ``axis`` to unit length; zero vectors stay zero with zero gradient."""
    x = as_diff(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    out = np.where(nonzero, x.data / safe, 0.0)

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(nonzero, (g - out * radial) / safe, 0.0),)

    return make_result(out, (x,), backward, "l2_normalize")


def cosine_similarity(a, b, axis: int = -1) -> DiffArray:
    """Cosine between broadcast-compatible vectors along ``axis``; 0 when either is zero."""
    return (l2_normalize(a, axis) * l2_normalize(b, axis)).sum(axis=axis)


def topk_sum(x, k: int, axis: int = -1) -> DiffArray:
    """Sum of the ``k`` largest entries along ``axis``."""
    x = as_diff(x)
    extent = x.shape[axis]
    if extent == 0:
        raise ShapeError("topk_sum over an empty axis")
    if not 1 <= k <= extent:
        raise ValueError(f"k={k} outside [1, {extent}]")
    if k == extent:
        idx = None
        out = x.data.sum(axis=axis)
    else:
        idx = np.argpartition(-x.data, k - 1, axis=axis).take(np.arange(k), axis=axis)
        out = np.take_along_axis(x.data, idx, axis=axis).sum(axis=axis)

    def backward(g):
        ge = np.expand_dims(g, axis)
        if idx is None:
            return (np.broadcast_to(ge, x.shape).copy(),)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.broadcast_to(ge, idx.shape), axis=axis)
        return (gx,)

    return make_result(out, (x,), backward, "topk_sum")


# -- losses --------------------------------------------------------------------------

def squared_error(scores, targets) -> DiffArray:
    """Sum over the last axis of ``(scores - targets)**2``, one value per row."""
    diff = as_diff(scores) - as_diff(targets)
    return (diff * diff).sum(axis=-1)


def cross_entropy(logits, labels: np.ndarray) -> DiffArray:
    """Per-row ``-log softmax(logits)[label]``."""
    logits = as_diff(logits)
    onehot = np.eye(logits.shape[-1], dtype=logits.dtype)[np.asarray(labels)]
    return -(log_softmax(logits, axis=-1) * onehot).sum(axis=-1)
