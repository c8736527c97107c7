"""Differentiable primitives on channels-last (B, H, W, C) arrays.

Every primitive is a pure ``forward`` returning ``(output, cache)`` plus a
matching ``*_backward`` that turns the upstream gradient and the cache into
input/parameter gradients. Arithmetic happens in the dtype of the inputs, so
the same code serves the float32 production path and the float64
verification path.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


def output_extent(size, k, stride, padding):
    """Spatial output extent plus (before, after) padding for one axis.

    Same-padding puts the odd extra element after (bottom/right).
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}", stride=stride)
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            raise ShapeError(
                f"window {k} larger than input extent {size} (valid padding)",
                size=size, window=k)
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _check_4d(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (B,H,W,C), got shape {x.shape}",
                         shape=tuple(x.shape))


def _windows(xp, kh, kw, stride, oh, ow):
    # (B, oh, ow, C, kh, kw) strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :oh, :ow]


# ---------------------------------------------------------------- conv2d

def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    _check_4d(x, "conv2d input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D (kh,kw,Cin,Cout), got {kernel.shape}",
                         kernel=tuple(kernel.shape))
    B, H, W, C = x.shape
    kh, kw, cin, cout = kernel.shape
    if cin != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {cin}",
                         input_channels=C, kernel_in_channels=cin)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)",
                         bias=tuple(bias.shape), out_channels=cout)
    oh, pt, pb = output_extent(H, kh, stride, padding)
    ow, pl, pr = output_extent(W, kw, stride, padding)
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        xp = x
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride][:, :oh, :ow]).reshape(-1, C)
    else:
        win = _windows(xp, kh, kw, stride, oh, ow)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * oh * ow, kh * kw * C)
    y = cols @ kernel.reshape(kh * kw * C, cout)
    if bias is not None:
        y += bias
    cache = (cols, x.shape, xp.shape, kernel, stride, (pt, pl), (oh, ow), bias is not None)
    return y.reshape(B, oh, ow, cout), cache


def conv2d_backward(dy, cache):
    """Returns (dx, dkernel, dbias); dbias is None when the conv had no bias."""
    cols, xshape, xpshape, kernel, stride, (pt, pl), (oh, ow), has_bias = cache
    kh, kw, C, cout = kernel.shape
    B, H, W, _ = xshape
    dy2 = dy.reshape(-1, cout)
    dk = (cols.T @ dy2).reshape(kernel.shape)
    db = dy2.sum(axis=0) if has_bias else None
    dcols = dy2 @ kernel.reshape(kh * kw * C, cout).T
    dxp = np.zeros(xpshape, dtype=dy.dtype)
    dcols = dcols.reshape(B, oh, ow, kh, kw, C)
    hs = stride * (oh - 1) + 1
    ws = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, i, j]
    dx = dxp[:, pt:pt + H, pl:pl + W]
    return dx, dk, db


# ---------------------------------------------------------------- pooling

def maxpool2d(x, window, stride, padding="valid"):
    _check_4d(x, "maxpool input")
    if window < 1:
        raise ShapeError(f"pool window must be >= 1, got {window}", window=window)
    B, H, W, C = x.shape
    oh, pt, pb = output_extent(H, window, stride, padding)
    ow, pl, pr = output_extent(W, window, stride, padding)
    xp = x
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    win = _windows(xp, window, window, stride, oh, ow).reshape(B, oh, ow, C, window * window)
    # argmax returns the first maximal element: ties go to the lowest flat index
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, (arg, x.shape, xp.shape, window, stride, (pt, pl))


def maxpool2d_backward(dy, cache):
    arg, xshape, xpshape, k, stride, (pt, pl) = cache
    B, oh, ow, C = dy.shape
    dxp = np.zeros(xpshape, dtype=dy.dtype)
    hs = stride * (oh - 1) + 1
    ws = stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            if hit.any():
                dxp[:, i:i + hs:stride, j:j + ws:stride] += np.where(hit, dy, 0)
    return dxp[:, pt:pt + xshape[1], pl:pl + xshape[2]]


def _pool_counts(H, W, window, stride, pads, out, dtype):
    """Number of real (non-padding) elements under each output window."""
    (pt, pb, pl, pr), (oh, ow) = pads, out
    ones = np.pad(np.ones((1, H, W, 1), dtype=dtype), ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return _windows(ones, window, window, stride, oh, ow).sum(axis=(-1, -2))


def avgpool2d(x, window, stride, padding="valid"):
    """Window mean; with same-padding the padded cells are excluded from the count."""
    _check_4d(x, "avgpool input")
    if window < 1:
        raise ShapeError(f"pool window must be >= 1, got {window}", window=window)
    B, H, W, C = x.shape
    oh, pt, pb = output_extent(H, window, stride, padding)
    ow, pl, pr = output_extent(W, window, stride, padding)
    xp = x
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    counts = _pool_counts(H, W, window, stride, (pt, pb, pl, pr), (oh, ow), x.dtype)
    y = _windows(xp, window, window, stride, oh, ow).sum(axis=(-1, -2)) / counts
    return y, (counts, x.shape, xp.shape, window, stride, (pt, pl))


def avgpool2d_backward(dy, cache):
    counts, xshape, xpshape, k, stride, (pt, pl) = cache
    B, oh, ow, C = dy.shape
    share = dy / counts
    dxp = np.zeros(xpshape, dtype=dy.dtype)
    hs = stride * (oh - 1) + 1
    ws = stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + hs:stride, j:j + ws:stride] += share
    return dxp[:, pt:pt + xshape[1], pl:pl + xshape[2]]


def global_avgpool(x):
    _check_4d(x, "global pool input")
    return x.mean(axis=(1, 2)), x.shape


def global_avgpool_backward(dy, xshape):
    B, H, W, C = xshape
    return np.broadcast_to(dy[:, None, None, :] / (H * W), xshape).copy()


# ---------------------------------------------------------------- batchnorm

def batchnorm(x, gamma, beta, mode, running_mean, running_var,
              eps=BN_EPSILON, momentum=BN_MOMENTUM):
    """Per-channel normalization over every axis but the last.

    Returns ``(y, (new_mean, new_var), cache)``. The running state is never
    mutated in place; eval mode returns it unchanged.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm scale/shift must have shape ({C},)",
                         channels=C, gamma=tuple(gamma.shape), beta=tuple(beta.shape))
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        n = x.size // C
        if n < 2:
            raise ShapeError("batchnorm in train mode needs at least 2 elements per channel "
                             "(batch*height*width); variance is undefined",
                             elements_per_channel=n)
        mean = x.mean(axis=axes)
        centered = x - mean
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        state = (momentum * running_mean + (1 - momentum) * mean.astype(running_mean.dtype),
                 momentum * running_var + (1 - momentum) * var.astype(running_var.dtype))
    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x - running_mean.astype(x.dtype)) * inv_std
        state = (running_mean, running_var)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    y = gamma * xhat + beta
    return y, state, (xhat, inv_std, gamma, mode)


def batchnorm_backward(dy, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, mode = cache
    axes = tuple(range(dy.ndim - 1))
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    if mode == "eval":
        return dy * (gamma * inv_std), dgamma, dbeta
    n = dy.size // dy.shape[-1]
    dx = (gamma * inv_std / n) * (n * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- dense

def dense(x, weight, bias=None):
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}",
                         input=tuple(x.shape), weight=tuple(weight.shape))
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense inner dimension mismatch: input D={x.shape[1]}, "
                         f"weight D={weight.shape[0]}",
                         input_dim=x.shape[1], weight_dim=weight.shape[0])
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)",
                         bias=tuple(bias.shape), out_dim=weight.shape[1])
    y = x @ weight
    if bias is not None:
        y += bias
    return y, (x, weight, bias is not None)


def dense_backward(dy, cache):
    x, weight, has_bias = cache
    return dy @ weight.T, x.T @ dy, (dy.sum(axis=0) if has_bias else None)


# ---------------------------------------------------------------- structural

def concat_channels(inputs):
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    lead = inputs[0].shape[:-1]
    for i, t in enumerate(inputs):
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat input {i} has leading shape {t.shape[:-1]}, expected {lead}",
                             index=i, expected=lead, got=t.shape[:-1])
    sizes = [t.shape[-1] for t in inputs]
    out = inputs[0] if len(inputs) == 1 else np.concatenate(inputs, axis=-1)
    return out, sizes


def split_channels(dy, sizes):
    """Inverse of concat_channels: slices the channel axis by the recorded offsets."""
    offsets = np.cumsum([0] + list(sizes))
    return [dy[..., offsets[i]:offsets[i + 1]] for i in range(len(sizes))]


def residual_add_scaled(shortcut, branch, scale):
    if shortcut.shape != branch.shape:
        raise ShapeError(f"residual shapes differ: shortcut {shortcut.shape}, branch {branch.shape}",
                         shortcut=tuple(shortcut.shape), branch=tuple(branch.shape))
    if not 0 < scale <= 1:
        raise ValueError(f"residual scale must lie in (0, 1], got {scale}")
    return shortcut + branch.dtype.type(scale) * branch


def residual_add_scaled_backward(dy, scale):
    """Gradients with respect to (shortcut, branch)."""
    return dy, dy * dy.dtype.type(scale)


def relu(x):
    y = np.maximum(x, 0)
    return y, x > 0


def relu_backward(dy, mask):
    # strict > 0 mask: the gradient at exactly zero is zero
    return dy * mask


def dropout(x, rate, rng):
    if rate <= 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------- loss

def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, K), got {logits.shape}", shape=tuple(logits.shape))
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}",
                         batch=B, labels=tuple(labels.shape))
    bad = (labels < 0) | (labels >= K)
    if bad.any():
        raise ValueError(f"labels out of range [0, {K}): {sorted(set(labels[bad].tolist()))}")
    logp = log_softmax(logits)
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1
    grad /= B
    return float(loss), grad


def is_finite(*arrays):
    return all(bool(np.isfinite(a).all()) for a in arrays if a is not None)
