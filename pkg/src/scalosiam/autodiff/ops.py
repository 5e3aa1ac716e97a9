"""Differentiable layers used by the Siamese networks.

Image tensors are laid out channels-last, either ``[H, W, C]`` or batched
``[N, H, W, C]``. Convolution is cross-correlation (no kernel flip), stride 1.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _needs_grad

BCE_CLAMP = 1e-7

# When a list, every piecewise op appends its branch pattern (relu masks,
# |x| signs, pool argmaxes, clamp masks) so gradient checks can detect probes
# that straddle a kink.
_branch_trace = None


def _record(pattern):
    if _branch_trace is not None:
        _branch_trace.append(pattern)


def _result(data, parents, backward):
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def absolute(x):
    sign = np.sign(x.data)
    _record(sign)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def relu(x):
    mask = x.data > 0
    _record(mask)
    # maximum, unlike where(mask), lets NaN through
    return _result(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _stable_sigmoid(z):
    """Overflow-free logistic; large positive inputs stop just below 1."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = np.minimum(1.0 / (1.0 + np.exp(-z[pos])), np.nextafter(z.dtype.type(1), z.dtype.type(0)))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_slope(z):
    e = np.exp(-np.abs(z))
    return e / (1.0 + e) ** 2


def sigmoid(x):
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * _sigmoid_slope(x.data),))


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x, rate, training, rng):
    """Inverted dropout; identity at inference or when ``rate`` is 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -------------------------------------------------------------------- shaping

def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x, batched=None):
    """Flatten to ``[n]`` (or ``[N, n]`` for a batched image tensor)."""
    if batched is None:
        batched = x.data.ndim == 4
    if batched:
        return reshape(x, (x.shape[0], -1))
    return reshape(x, (-1,))


def concat(tensors):
    """Join along the leading axis."""
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=0), tensors, backward)


def take(x, start, stop):
    """Slice ``x[start:stop]`` along the leading axis."""
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop], (x,), backward)


# --------------------------------------------------------------------- layers

def dense(x, weights, bias):
    """Affine map ``x @ W + b`` for ``x`` of shape ``[n]`` or ``[N, n]``."""
    if x.shape[-1] != weights.shape[0] or weights.shape[1:] != bias.shape:
        raise ValueError(
            f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} disagree"
        )
    xd, wd = x.data, weights.data
    out = xd @ wd + bias.data

    def backward(g):
        if xd.ndim == 1:
            gw = np.outer(xd, g)
            gb = g
        else:
            gw = xd.T @ g
            gb = g.sum(axis=0)
        return g @ wd.T, gw, gb

    return _result(out, (x, weights, bias), backward)


def conv2d(x, kernels, bias, padding=0):
    """Valid (or zero-padded) stride-1 cross-correlation.

    ``x``: ``[H, W, C_in]`` or ``[N, H, W, C_in]``; ``kernels``:
    ``[K, K, C_in, C_out]``; output spatial size ``H + 2*padding - K + 1``.
    """
    k, k2, c_in, c_out = kernels.shape
    if k != k2:
        raise ValueError("conv2d: kernels must be square")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.shape[-1] != c_in:
        raise ValueError(f"conv2d: input has {xd.shape[-1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape}, expected {(c_out,)}")
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    n, h, w, _ = xd.shape
    if k > h or k > w:
        raise ValueError(f"conv2d: kernel {k} larger than input {h}x{w}")
    ho, wo = h - k + 1, w - k + 1
    # windows [N, Ho, Wo, C_in, K, K] reordered to rows laid out (K, K, C_in),
    # matching the kernel's own memory order
    windows = sliding_window_view(xd, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = windows.reshape(n * ho * wo, k * k * c_in)
    wmat = kernels.data.reshape(k * k * c_in, c_out)
    out = (cols @ wmat + bias.data).reshape(n, ho, wo, c_out)
    if squeeze:
        out = out[0]

    def backward(g):
        g2 = g.reshape(n * ho * wo, c_out)
        gw = (cols.T @ g2).reshape(k, k, c_in, c_out)
        gb = g2.sum(axis=0)
        if not _needs_grad(x):
            return None, gw, gb
        g4 = g2.reshape(n, ho, wo, c_out)
        kt = np.ascontiguousarray(kernels.data.transpose(0, 1, 3, 2))
        gx = np.zeros((n, h, w, c_in), dtype=g2.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, i:i + ho, j:j + wo, :] += g4 @ kt[i, j]
        if padding:
            gx = gx[:, padding:-padding, padding:-padding, :]
        if squeeze:
            gx = gx[0]
        return gx, gw, gb

    return _result(out, (x, kernels, bias), backward)


def maxpool2(x):
    """Non-overlapping 2x2 max pool; an odd trailing row/column is dropped."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, h, w, c = xd.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2: input {h}x{w} smaller than 2x2")
    h2, w2 = h // 2, w // 2
    blocks = (
        xd[:, : 2 * h2, : 2 * w2, :]
        .reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h2, w2, c, 4)
    )
    # argmax returns the first maximum, i.e. row-major tie-breaking in the window
    idx = blocks.argmax(axis=-1)
    _record(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        onehot = np.zeros((n, h2, w2, c, 4), dtype=g4.dtype)
        np.put_along_axis(onehot, idx[..., None], g4[..., None], axis=-1)
        gx = np.zeros((n, h, w, c), dtype=g4.dtype)
        gx[:, : 2 * h2, : 2 * w2, :] = (
            onehot.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        )
        return (gx[0] if squeeze else gx,)

    return _result(out, (x,), backward)


# ----------------------------------------------------------------------- loss

def bce_loss(prediction, target):
    """Mean binary cross entropy between probabilities and 0/1 targets.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; the clamp passes no
    gradient where it is active.
    """
    t = np.asarray(target, dtype=prediction.dtype)
    if np.any((t != 0) & (t != 1)):
        raise ValueError("bce_loss: targets must be 0 or 1")
    if t.shape != prediction.shape:
        t = np.broadcast_to(t, prediction.shape)
    p = prediction.data
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    count = p.size
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).sum() / count
    inside = (p >= BCE_CLAMP) & (p <= 1 - BCE_CLAMP)
    _record(inside)

    def backward(g):
        d = (-(t / pc) + (1 - t) / (1 - pc)) / count
        return (g * d * inside,)

    return _result(np.asarray(loss, dtype=prediction.dtype), (prediction,), backward)


def total(x):
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(x.dtype),),
    )
