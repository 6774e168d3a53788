"""Differentiable operators.

Each op computes its forward value with numpy and registers a backward rule
returning one gradient per parent. Reductions run in float64.
"""
from __future__ import annotations

import math

import numpy as np

from .. import kernels
from .tensor import DTYPE, Tensor, as_tensor

MASK_SENTINEL = -1e30


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), bwd)


def masked_fill(x: Tensor, keep, value: float = 0.0) -> Tensor:
    """Replace entries where ``keep`` is False by ``value`` (gradient blocked there)."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, x.data, value)

    def bwd(g):
        return (_unbroadcast(np.where(keep, g, 0.0), x.shape),)

    return Tensor.from_op(out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    out, t = kernels.gelu_forward(x.data)

    def bwd(g):
        return (kernels.gelu_backward(x.data, t, g),)

    return Tensor.from_op(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        return (g * (x.data > 0),)

    return Tensor.from_op(out, (x,), bwd)


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return Tensor.from_op(out, (x,), bwd)


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return Tensor.from_op(np.array(out, dtype=DTYPE), (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor.from_op(out, tensors, bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, bwd)


def select_rows(x: Tensor, index) -> Tensor:
    """out[b] = x[b, index[b]] for x of shape (B, L, C)."""
    index = np.asarray(index, dtype=np.int64)
    B = x.shape[0]
    if index.shape != (B,):
        raise ShapeError(f"index must have shape ({B},), got {index.shape}")
    rows = np.arange(B)
    out = x.data[rows, index]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return Tensor.from_op(out, (x,), bwd)


# ---------------------------------------------------------------- reductions

def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return Tensor.from_op(out, (x,), bwd)


def mean_pool(x: Tensor, axes) -> Tensor:
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axes)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return Tensor.from_op(out, (x,), bwd)


# -------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(out, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] @ weight[in, out] + bias[out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bwd)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def bwd(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        flat = g.reshape(-1, g.shape[-1])
        if gamma is not None:
            grads.append((flat * xhat.reshape(flat.shape)).sum(axis=0))
        if beta is not None:
            grads.append(flat.sum(axis=0))
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return Tensor.from_op(out, parents, bwd)


def channel_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                 eps: float = 1e-5) -> Tensor:
    """layer_norm over axis 1 of a (B, C, ...) feature map."""
    perm = (0,) + tuple(range(2, x.ndim)) + (1,)
    back = (0, x.ndim - 1) + tuple(range(1, x.ndim - 1))
    return transpose(layer_norm(transpose(x, perm), gamma, beta, eps), back)


# -------------------------------------------------------------- convolutions

def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3-D cross-correlation. x (B, Cin, H, W, D), w (Cout, Cin, kh, kw, kd)."""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError("conv3d expects 5-D input and weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    stride = tuple(int(s) for s in stride)
    padding = tuple(int(p) for p in padding)
    if any(s < 1 for s in stride):
        raise ShapeError("conv3d strides must be >= 1")
    k = w.shape[2:]
    padded = tuple(n + 2 * p for n, p in zip(x.shape[2:], padding))
    if any(kk > n for kk, n in zip(k, padded)):
        raise ShapeError(f"conv3d kernel {k} larger than padded input {padded}")
    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]]
    # win: (B, Cin, Ho, Wo, Do, kh, kw, kd)
    out = np.tensordot(win, w.data, axes=((1, 5, 6, 7), (1, 2, 3, 4)))  # (B, Ho, Wo, Do, Cout)
    out = np.moveaxis(out, -1, 1)
    if b is not None:
        out = out + b.data[None, :, None, None, None]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gw = np.tensordot(g, win, axes=((0, 2, 3, 4), (0, 2, 3, 4)))  # (Cout, Cin, kh, kw, kd)
        gcols = np.tensordot(g, w.data, axes=((1,), (0,)))  # (B, Ho, Wo, Do, Cin, kh, kw, kd)
        gcols = np.moveaxis(gcols, 4, 1)
        gxp = kernels.col2im3d(gcols, padded, stride)
        sl = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))
        gx = gxp[sl]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, bwd)


def conv1d_depthwise(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel same-length 1-D cross-correlation. x (B, C, L), w (C, k), k odd."""
    if x.ndim != 3 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv1d_depthwise: incompatible shapes {x.shape} and {w.shape}")
    if w.shape[1] % 2 == 0:
        raise ShapeError("conv1d_depthwise needs an odd kernel size")
    out = kernels.depthwise_conv1d(x.data, w.data)
    if b is not None:
        out = out + b.data[None, :, None]

    def bwd(g):
        gx, gw = kernels.depthwise_conv1d_backward(x.data, w.data, np.ascontiguousarray(g))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, bwd)


# ------------------------------------------------------------ softmax & loss

def _check_rows(valid: np.ndarray) -> None:
    if not np.all(valid.any(axis=-1)):
        raise ValueError("masked_softmax: a row has no valid position")


def masked_softmax(logits: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to ``mask``; masked entries are exactly 0."""
    z = logits.data
    if axis not in (-1, z.ndim - 1):
        raise ValueError("masked_softmax works on the last axis")
    if mask is None:
        valid = np.ones(z.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    _check_rows(valid)
    zm = np.where(valid, z, MASK_SENTINEL)
    zm = zm - zm.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(zm), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(p, (logits,), bwd)


def log_softmax_masked(z: np.ndarray, valid: np.ndarray) -> np.ndarray:
    zm = np.where(valid, z, MASK_SENTINEL)
    m = zm.max(axis=-1, keepdims=True)
    lse = m + np.log(np.where(valid, np.exp(zm - m), 0.0).sum(axis=-1, keepdims=True))
    return np.where(valid, z - lse, -np.inf)


def cross_entropy(logits: Tensor, target, mask=None, reduction: str = "sum") -> Tensor:
    """Negative log masked-softmax probability of ``target`` along the last axis.

    ``target`` has the logits' shape without the last axis. Rows are summed
    (``reduction="sum"``) or averaged (``"mean"``).
    """
    z = logits.data
    target = np.asarray(target, dtype=np.int64)
    if target.shape != z.shape[:-1]:
        raise ShapeError(f"target shape {target.shape} does not match logits rows {z.shape[:-1]}")
    K = z.shape[-1]
    if np.any(target < 0) or np.any(target >= K):
        raise ValueError("cross_entropy: target index out of range")
    valid = np.ones(z.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), z.shape)
    _check_rows(valid)
    onehot = np.zeros(z.shape, dtype=DTYPE)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    if np.any((onehot > 0) & ~valid):
        raise ValueError("cross_entropy: target lies at a masked position")
    logp = log_softmax_masked(z, valid)
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    n_rows = max(int(np.prod(z.shape[:-1])), 1)
    scale = 1.0 if reduction == "sum" else 1.0 / n_rows
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    out = -np.sum(picked) * scale

    def bwd(g):
        p = np.where(valid, np.exp(logp), 0.0)
        return ((p - onehot) * (g * scale),)

    return Tensor.from_op(np.asarray(out), (logits,), bwd)


# ----------------------------------------------------------------- attention

def multihead_attention(x: Tensor, mask, heads: int, params: dict) -> Tensor:
    """Masked multi-head self-attention on x (B, L, C).

    ``mask`` (B, L) marks valid tokens: invalid tokens are never attended to
    and their output rows are exactly zero. ``params`` holds wq, bq, wk, bk,
    wv, bv, wo, bo (weights laid out (in, out)).
    """
    B, L, C = x.shape
    if C % heads:
        raise ShapeError(f"model width {C} is not divisible by {heads} heads")
    dh = C // heads
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B, L):
        raise ShapeError(f"attention mask must have shape {(B, L)}, got {mask.shape}")

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, params["wq"], params["bq"]))
    k = split(linear(x, params["wk"], params["bk"]))
    v = split(linear(x, params["wv"], params["bv"]))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = masked_softmax(scores, mask[:, None, None, :])
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (B, L, C))
    out = linear(ctx, params["wo"], params["bo"])
    return masked_fill(out, mask[:, :, None], 0.0)
