"""Forward/backward primitives for channels-first tensors ``(N, C, *spatial)``.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(dout, cache)``. All arithmetic is float64. The same code serves
2D and 3D inputs; the spatial rank is read off the array.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from ..errors import ShapeError, ValidationError


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _ntuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    t = tuple(int(a) for a in v)
    if len(t) != n:
        raise ShapeError(f"expected {n} values, got {t}")
    return t


def same_pads(n: int, k: int, s: int) -> tuple[int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def conv_output_size(n: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-n // s)
    return (n - k) // s + 1


# ---------------------------------------------------------------------------
# convolution (cross-correlation)

def conv_forward(x, w, b, stride=1, padding="same"):
    """N-d cross-correlation with zero padding.

    ``x``: (N, C, *S), ``w``: (F, C, *K), ``b``: (F,). ``padding`` is
    ``"same"`` (output ``ceil(n / stride)``) or ``"valid"``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    nd = x.ndim - 2
    if nd < 1 or w.ndim != nd + 2:
        raise ShapeError(f"input {x.shape} and kernel {w.shape} ranks disagree")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {w.shape[1]} input channels, input has {x.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} filters")
    if padding not in ("same", "valid"):
        raise ValidationError(f"padding must be 'same' or 'valid', got {padding!r}")
    ks = w.shape[2:]
    stride = _ntuple(stride, nd)
    if min(stride) < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        pads = [same_pads(n, k, s) for n, k, s in zip(x.shape[2:], ks, stride)]
    else:
        pads = [(0, 0)] * nd
        if any(n < k for n, k in zip(x.shape[2:], ks)):
            raise ShapeError(f"valid convolution needs input {x.shape[2:]} >= kernel {ks}")
    out_sz = tuple(conv_output_size(n, k, s, padding) for n, k, s in zip(x.shape[2:], ks, stride))

    N, C = x.shape[:2]
    F = w.shape[0]
    # channel-major padded copy: (C, N, *S_padded)
    xp = np.pad(x.transpose(1, 0, *range(2, nd + 2)), [(0, 0), (0, 0)] + pads)
    acc = _correlate_cm(xp, w, stride, out_sz)
    out = acc.transpose(1, 0, *range(2, nd + 2)) + b.reshape((1, F) + (1,) * nd)
    cache = (x.shape, xp, w, stride, pads, out_sz)
    return np.ascontiguousarray(out), cache


# float64 elements per im2col block; larger batches are processed in slices
_COL_BUDGET = 1 << 23


def _chunks(n: int, per_sample: int) -> list[tuple[int, int]]:
    step = max(1, _COL_BUDGET // max(per_sample, 1))
    return [(i, min(n, i + step)) for i in range(0, n, step)]


def _offset_slices(ks, stride, out_sz):
    for off in product(*(range(k) for k in ks)):
        yield tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sz))


def _correlate_cm(xp, w, stride, out_sz):
    """Cross-correlate a padded channel-major ``(C, N, *S)`` array; returns ``(F, N, *out)``."""
    C, N = xp.shape[:2]
    F, ks = w.shape[0], w.shape[2:]
    w2 = w.reshape(F, -1)
    acc = np.empty((F, N) + tuple(out_sz))
    for n0, n1 in _chunks(N, C * math.prod(ks) * math.prod(out_sz)):
        acc[:, n0:n1] = (w2 @ _im2col(xp, ks, stride, out_sz, n0, n1)).reshape((F, n1 - n0) + tuple(out_sz))
    return acc


def _im2col(xp, ks, stride, out_sz, n0, n1):
    """Columns ``(C * prod(K), (n1 - n0) * prod(out))`` for samples ``n0:n1``."""
    C = xp.shape[0]
    cols = np.empty((C, math.prod(ks), n1 - n0) + out_sz)
    for j, sl in enumerate(_offset_slices(ks, stride, out_sz)):
        cols[:, j] = xp[(slice(None), slice(n0, n1)) + sl]
    return cols.reshape(C * math.prod(ks), -1)


def conv_backward(dout, cache):
    x_shape, xp, w, stride, pads, out_sz = cache
    nd = len(out_sz)
    N, C = x_shape[:2]
    F = w.shape[0]
    ks = w.shape[2:]
    K = math.prod(ks)
    d = np.ascontiguousarray(as_tensor(dout).transpose(1, 0, *range(2, nd + 2)))
    w2 = w.reshape(F, -1)
    dw = np.zeros_like(w2)
    unit = all(s == 1 for s in stride)
    dxp = None if unit else np.zeros_like(xp)
    for n0, n1 in _chunks(N, C * K * math.prod(out_sz)):
        dc = d[:, n0:n1].reshape(F, -1)
        dw += dc @ _im2col(xp, ks, stride, out_sz, n0, n1).T
        if not unit:
            dcols = (w2.T @ dc).reshape((C, K, n1 - n0) + out_sz)
            for j, sl in enumerate(_offset_slices(ks, stride, out_sz)):
                dxp[(slice(None), slice(n0, n1)) + sl] += dcols[:, j]
    db = d.reshape(F, -1).sum(axis=1)
    if unit:
        # stride 1: dx is the full correlation of dout with the flipped kernel
        wf = np.flip(w, axis=tuple(range(2, nd + 2))).swapaxes(0, 1)
        dpad = np.pad(d, [(0, 0), (0, 0)] + [(k - 1 - lo, k - 1 - hi) for k, (lo, hi) in zip(ks, pads)])
        dx = _correlate_cm(dpad, np.ascontiguousarray(wf), stride, x_shape[2:])
    else:
        inner = tuple(slice(lo, lo + n) for (lo, _hi), n in zip(pads, x_shape[2:]))
        dx = dxp[(slice(None), slice(None)) + inner]
    return np.ascontiguousarray(dx.transpose(1, 0, *range(2, nd + 2))), dw.reshape(w.shape), db


# ---------------------------------------------------------------------------
# pooling

def _replicate_pad(x, factor):
    """Pad trailing edges by replication so each spatial size divides ``factor``."""
    pads = []
    for n, f in zip(x.shape[2:], factor):
        pads.append((0, (-n) % f))
    if any(p for _, p in pads):
        x = np.pad(x, [(0, 0), (0, 0)] + pads, mode="edge")
    return x, pads


def _fold_pad(dx, orig_spatial):
    """Adjoint of :func:`_replicate_pad`: fold replicated gradients onto the edge."""
    for axis, n in enumerate(orig_spatial, start=2):
        if dx.shape[axis] == n:
            continue
        head = np.take(dx, np.arange(n), axis=axis)
        tail = np.take(dx, np.arange(n, dx.shape[axis]), axis=axis).sum(axis=axis, keepdims=True)
        edge = [slice(None)] * dx.ndim
        edge[axis] = slice(n - 1, n)
        head[tuple(edge)] += tail
        dx = head
    return dx


def _blocks(xp, factor):
    """View (N, C, *S) as (N, C, *S/f, prod(f)) with each window flattened last."""
    nd = len(factor)
    N, C = xp.shape[:2]
    coarse = tuple(n // f for n, f in zip(xp.shape[2:], factor))
    split = (N, C) + tuple(v for pair in zip(coarse, factor) for v in pair)
    perm = (0, 1) + tuple(2 + 2 * i for i in range(nd)) + tuple(3 + 2 * i for i in range(nd))
    return xp.reshape(split).transpose(perm).reshape((N, C) + coarse + (-1,)), coarse


def _unblocks(blocks, factor, coarse, padded_shape):
    nd = len(factor)
    N, C = blocks.shape[:2]
    y = blocks.reshape((N, C) + coarse + tuple(factor))
    perm = [0, 1]
    for i in range(nd):
        perm += [2 + i, 2 + nd + i]
    return y.transpose(perm).reshape(padded_shape)


def pool_forward(x, kind="max", factor=2):
    """Non-overlapping max/avg pooling; ragged edges are padded by replication."""
    x = as_tensor(x)
    nd = x.ndim - 2
    factor = _ntuple(factor, nd)
    if min(factor) < 1:
        raise ValidationError(f"pool factor must be >= 1, got {factor}")
    if kind not in ("max", "avg"):
        raise ValidationError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    xp, _ = _replicate_pad(x, factor)
    blocks, coarse = _blocks(xp, factor)
    if kind == "max":
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    else:
        arg = None
        out = blocks.mean(axis=-1)
    return out, (kind, x.shape, xp.shape, factor, coarse, arg)


def pool_backward(dout, cache):
    kind, x_shape, padded_shape, factor, coarse, arg = cache
    dout = as_tensor(dout)
    size = math.prod(factor)
    if kind == "max":
        blocks = np.zeros(dout.shape + (size,))
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    else:
        blocks = np.broadcast_to(dout[..., None] / size, dout.shape + (size,))
    dxp = _unblocks(blocks, factor, coarse, padded_shape)
    return np.ascontiguousarray(_fold_pad(dxp, x_shape[2:]))


def global_avg_pool_forward(x):
    x = as_tensor(x)
    axes = tuple(range(2, x.ndim))
    return x.mean(axis=axes), x.shape


def global_avg_pool_backward(dout, cache):
    shape = cache
    n = math.prod(shape[2:])
    d = as_tensor(dout).reshape(shape[:2] + (1,) * (len(shape) - 2))
    return np.broadcast_to(d / n, shape).copy()


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None,
                      momentum=0.9, eps=1e-5):
    """Per-channel normalization over batch and spatial axes.

    In train mode the running statistics (if given) are updated in place
    by an exponential moving average with weight ``momentum`` on the old
    value.
    """
    x = as_tensor(x)
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    g = as_tensor(gamma).reshape(bshape)
    bt = as_tensor(beta).reshape(bshape)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValidationError("batch normalization in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu.reshape(C)
        if running_var is not None:
            running_var *= momentum
            running_var += (1.0 - momentum) * var.reshape(C)
        return g * xhat + bt, ("train", xhat, inv, g, axes)
    if mode != "infer":
        raise ValidationError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(as_tensor(running_var).reshape(bshape) + eps)
    xhat = (x - as_tensor(running_mean).reshape(bshape)) * inv
    return g * xhat + bt, ("infer", xhat, inv, g, axes)


def batchnorm_backward(dout, cache):
    mode, xhat, inv, g, axes = cache
    dout = as_tensor(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * g
    if mode == "infer":
        return dxhat * inv, dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv / m) * (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# dense, activations, reshaping

def dense_forward(x, w, b):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: input features {flat.shape[1]}, weight {w.shape}, bias {b.shape}")
    return flat @ w + b, (x.shape, flat, w)


def dense_backward(dout, cache):
    x_shape, flat, w = cache
    dout = as_tensor(dout)
    return (dout @ w.T).reshape(x_shape), flat.T @ dout, dout.sum(axis=0)


def sigmoid(x):
    """Overflow-free logistic function."""
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation_forward(x, kind="relu"):
    x = as_tensor(x)
    if kind == "relu":
        return np.maximum(x, 0.0), ("relu", x > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return s, ("sigmoid", s)
    raise ValidationError(f"unknown activation {kind!r}")


def activation_backward(dout, cache):
    kind, saved = cache
    if kind == "relu":
        return as_tensor(dout) * saved
    return as_tensor(dout) * saved * (1.0 - saved)


def upsample_forward(x, factor=2):
    """Nearest-neighbour upsampling by integer per-axis factors."""
    x = as_tensor(x)
    factor = _ntuple(factor, x.ndim - 2)
    out = x
    for axis, f in enumerate(factor, start=2):
        if f > 1:
            out = np.repeat(out, f, axis=axis)
    return out, (x.shape, factor)


def upsample_backward(dout, cache):
    x_shape, factor = cache
    d = as_tensor(dout)
    split = x_shape[:2] + tuple(v for n, f in zip(x_shape[2:], factor) for v in (n, f))
    axes = tuple(3 + 2 * i for i in range(len(factor)))
    return d.reshape(split).sum(axis=axes)


def crop_to(x, spatial):
    """Leading-corner crop of the spatial axes (adjoint: zero padding)."""
    sl = (slice(None), slice(None)) + tuple(slice(0, n) for n in spatial)
    return x[sl]


def pad_to(d, spatial):
    pads = [(0, 0), (0, 0)] + [(0, n - m) for n, m in zip(spatial, d.shape[2:])]
    return np.pad(d, pads)
