"""Spatial layer primitives and losses over NHWC tensors.

Every op accepts a batched ``[N, H, W, C]`` input; ``conv2d`` also accepts an
unbatched ``[H, W, C]`` image and returns an unbatched result.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, clip, log, mean, tabs, tsum

PROB_EPS = 1e-7


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, H', W', C, k, k) view
    return sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Discrete cross-correlation with a ``[k, k, Cin, Cout]`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim == 3:
        out = conv2d(x.reshape((1,) + x.shape), kernel, bias, stride, padding)
        return out.reshape(out.shape[1:])
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    k, k2, cin, cout = kernel.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError("kernel larger than padded input")
    xp = _pad(x.data, padding)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    offsets = [(i, j) for i in range(k) for j in range(k)]
    if k == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride, :][:, :ho, :wo]).reshape(n * ho * wo, cin)
    else:
        # (i, j, c) column order matches kernel.reshape(k * k * cin, cout)
        cols = np.concatenate(
            [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i, j in offsets], axis=-1
        ).reshape(n * ho * wo, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(k, k, cin, cout)
        gcols = (g2 @ kmat.T).reshape(n, ho, wo, k * k, cin)
        gxp = np.zeros_like(xp)
        for o, (i, j) in enumerate(offsets):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, o, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return Tensor._from_op(out, parents, backward, "conv2d")


def depthwise_conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel cross-correlation with a ``[k, k, C]`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.shape[0]
    n, h, w, c = x.shape
    if kernel.shape[2] != c:
        raise ShapeError("depthwise kernel channel count differs from input")
    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride)
    ho, wo = win.shape[1], win.shape[2]
    kd = kernel.data.transpose(2, 0, 1)  # C, k, k
    out = np.einsum("nhwcij,cij->nhwc", win, kd, optimize=True)

    def backward(g):
        gk = np.einsum("nhwcij,nhwc->cij", win, g, optimize=True).transpose(1, 2, 0)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g * kernel.data[i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return gx, gk

    return Tensor._from_op(out, (x, kernel), backward, "depthwise_conv2d")


def conv_transpose2d(x, kernel, bias=None, stride: int = 2) -> Tensor:
    """Transposed convolution, output size ``(H - 1) * stride + k``; kernel ``[k, k, Cin, Cout]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.shape[0]
    n, h, w, c = x.shape
    if kernel.shape[2] != c:
        raise ShapeError("transpose-conv kernel channel count differs from input")
    cout = kernel.shape[3]
    ho, wo = (h - 1) * stride + k, (w - 1) * stride + k
    out = np.zeros((n, ho, wo, cout))
    kd = kernel.data
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * h:stride, j:j + stride * w:stride, :] += x.data @ kd[i, j]
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kd)
        xf = x.data.reshape(-1, c)
        for i in range(k):
            for j in range(k):
                gs = g[:, i:i + stride * h:stride, j:j + stride * w:stride, :]
                gx += gs @ kd[i, j].T
                gk[i, j] = xf.T @ gs.reshape(-1, cout)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return Tensor._from_op(out, parents, backward, "conv_transpose2d")


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x.data[:, :2 * h2, :2 * w2, :]
    blocks = xc.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        gx = np.zeros_like(x.data)
        gx[:, :2 * h2, :2 * w2, :] = gb
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "max_pool2d")


def global_avg_pool(x) -> Tensor:
    """Average over the spatial axes, keeping a 1x1 map."""
    return mean(as_tensor(x), axis=(1, 2), keepdims=True)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)
    n, h, w, c = x.shape

    def backward(g):
        return (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return Tensor._from_op(out, (x,), backward, "upsample_nearest")


def _normalize(x: Tensor, axes: tuple, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Fused (x - mean) / sqrt(var + eps) over ``axes`` with its exact gradient."""
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return Tensor._from_op(xhat, (x,), backward, "normalize"), mu, var


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis but the last.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    if training:
        xhat, mu, var = _normalize(x, axes, eps)
        count = x.data.size / x.shape[-1]
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(-1)
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        xhat = (x - running_mean) * (1.0 / np.sqrt(running_var + eps))
    return xhat * gamma + beta


def instance_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes."""
    x = as_tensor(x)
    xhat, _, _ = _normalize(x, (1, 2), eps)
    if gamma is not None:
        xhat = xhat * gamma + beta
    return xhat


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (logits,), backward, "log_softmax")


def softmax(logits) -> Tensor:
    from .tensor import exp
    return exp(log_softmax(logits))


# -- losses ----------------------------------------------------------------------------

def _nonempty(t: Tensor, name: str) -> None:
    if t.size == 0 or (t.ndim > 0 and t.shape[0] == 0):
        raise ValueError(f"{name}: empty batch")


def loss_bce(pred, target) -> Tensor:
    """Mean binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    pred = as_tensor(pred)
    _nonempty(pred, "loss_bce")
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    p = clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    terms = log(p) * target + log(1.0 - p) * (1.0 - target)
    return -mean(terms)


def loss_l1(a, b) -> Tensor:
    a = as_tensor(a)
    _nonempty(a, "loss_l1")
    return mean(tabs(a - b))


def loss_mse(a, b) -> Tensor:
    a = as_tensor(a)
    _nonempty(a, "loss_mse")
    d = a - b
    return mean(d * d)


def loss_ce(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class indices."""
    logits = as_tensor(logits)
    _nonempty(logits, "loss_ce")
    if logits.ndim == 1:
        logits = logits.reshape((1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    lsm = log_softmax(logits)
    picked = lsm[np.arange(len(labels)), labels]
    return -mean(picked)


def loss_nll(probs, labels) -> Tensor:
    """Mean cross-entropy on already-normalized class probabilities."""
    probs = as_tensor(probs)
    _nonempty(probs, "loss_nll")
    if probs.ndim == 1:
        probs = probs.reshape((1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    picked = probs[np.arange(len(labels)), labels]
    return -mean(log(clip(picked, PROB_EPS, 1.0)))


def squared_distance_sum(a, b) -> Tensor:
    d = as_tensor(a) - b
    return tsum(d * d)
