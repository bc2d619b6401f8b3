"""Stateless forward/backward kernels.

Every forward returns ``(output, cache)``; the matching backward takes the
cache back. Nothing here keeps state between calls, so the same weights can
be used from several threads as long as each caller holds its own caches.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, NonFiniteError, ShapeError, StateError


def _check_finite(x, what="input"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _windows(xp, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) view over the padded input
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``weight`` (F,C,kH,kW)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"input has {c} channels, kernel expects {wc}")
    if bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")
    if stride < 1 or padding < 0:
        raise ConfigError("stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("kernel larger than padded input")
    _check_finite(x)

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    # im2col: rows are output positions, columns are (C, kh, kw) patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ weight.reshape(f, -1).T + bias
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, weight, stride, padding)
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out, cache, need_param_grads=True):
    if cache is None:
        raise StateError("conv2d_backward called before forward")
    (n, c, h, w), cols, weight, stride, padding = cache
    f, _, kh, kw = weight.shape
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)

    grad_w = grad_b = None
    if need_param_grads:
        grad_w = (g.T @ cols).reshape(weight.shape)
        grad_b = g.sum(axis=0)

    gcols = (g @ weight.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    grad_x = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def pool2d_forward(x, kind="max", k=2, stride=None):
    """Max or average pooling without padding.

    For max pooling the switches hold, per output cell, the flat offset
    (row * k + col) of the maximum inside its window. ``argmax`` keeps the
    first occurrence, so ties resolve to the lowest linear index.
    """
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ConfigError("pool size and stride must be >= 1")
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects 4-d input, got {x.shape}")
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"pool window {k} exceeds input {x.shape[2:]}")
    _check_finite(x)
    win = _windows(x, k, k, stride)
    n, c, ho, wo = win.shape[:4]
    if kind == "max":
        flat = win.reshape(n, c, ho, wo, k * k)
        switches = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, switches[..., None], axis=-1)[..., 0]
    elif kind == "avg":
        switches = None
        out = win.mean(axis=(-2, -1))
    else:
        raise ConfigError(f"unknown pooling kind {kind!r}")
    cache = (x.shape, kind, k, stride, switches)
    return np.ascontiguousarray(out), cache


def pool2d_backward(grad_out, cache):
    if cache is None:
        raise StateError("pool2d_backward called before forward")
    shape, kind, k, stride, switches = cache
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    grad_x = np.zeros(shape, dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            if kind == "max":
                contrib = np.where(switches == i * k + j, grad_out, 0)
            else:
                contrib = grad_out / (k * k)
            grad_x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
    return grad_x


def switch_positions(cache):
    """Absolute (row, col) input coordinates selected by each max-pool switch."""
    _, kind, k, stride, switches = cache
    if kind != "max":
        raise ConfigError("only max pooling records switches")
    ho, wo = switches.shape[2], switches.shape[3]
    rows = np.arange(ho)[:, None] * stride + switches // k
    cols = np.arange(wo)[None, :] * stride + switches % k
    return rows, cols


def fully_connected_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    _check_finite(x)
    return x @ weight + bias, (x, weight)


def fully_connected_backward(grad_out, cache, need_param_grads=True):
    if cache is None:
        raise StateError("fully_connected_backward called before forward")
    x, weight = cache
    grad_x = grad_out @ weight.T
    if not need_param_grads:
        return grad_x, None, None
    return grad_x, x.T @ grad_out, grad_out.sum(axis=0)


def relu(x):
    return np.maximum(x, 0), x


def relu_backward(grad_out, cache, guided=False):
    mask = cache > 0
    if guided:
        mask = mask & (grad_out > 0)
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


def dropout(x, p, training, rng=None):
    """Inverted dropout; returns ``(output, mask)`` with ``mask=None`` when inactive."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / (1 - p)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    ``labels`` may be integer class ids or a one-hot matrix.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ConfigError("softmax cross-entropy needs at least two classes")
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != logits.shape or not np.all(labels.sum(axis=1) == 1):
            raise ShapeError("labels are not a valid one-hot matrix")
        labels = labels.argmax(axis=1)
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError("labels do not match logits")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
