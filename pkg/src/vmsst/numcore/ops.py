"""Differentiable operations over Tensors.

Each op computes its numpy forward result and registers a closed-form
backward rule on the active tape. Fused ops (softmax, layer_norm, gelu,
cross_entropy_rows, masked_mean_pool) keep the tape short, which matters for
step time and for finite-difference sweeps.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, EmptySequenceError, ShapeError
from .tensor import Tensor, _as_tensor, record, unbroadcast

GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_A = 0.044715


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; plain scalars adopt the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record("add", (a, b), out, bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record("sub", (a, b), out, bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record("div", (a, b), out, bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return record("matmul", (a, b), out, bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return record("exp", (a,), out, bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return record("log", (a,), out, bw)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return record("reshape", (a,), out, bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return record("transpose", (a,), out, bw)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        return (unbroadcast(g, a.shape),)

    return record("broadcast_to", (a,), out, bw)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tuple(ts), out, bw)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record("sum", (a,), out, bw)


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis)
    n = a.size if axis is None else a.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = np.expand_dims(g, axis) / n
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record("mean", (a,), out, bw)


def embedding(table, ids) -> Tensor:
    """Row gather: out[...,:] = table[ids[...], :]; backward scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record("embedding", (table,), out, bw)


def put_rows(src, idx, n_rows: int) -> Tensor:
    """Scatter rows of src into a zero tensor of n_rows rows (idx unique)."""
    src = _as_tensor(src)
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    out[idx] = src.data

    def bw(g):
        return (g[idx],)

    return record("put_rows", (src,), out, bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.shape[axis] < 1:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record("softmax", (a,), out, bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)"
        )
    if eps < 0:
        raise ContractError("layer_norm eps must be >= 0")
    mean = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        gxhat = g * gamma.data
        # d/dx of (x - mean(x)) * inv with inv depending on x
        gvar = (gxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        gmean = (-gxhat * inv).sum(axis=-1, keepdims=True)
        gx = gxhat * inv + gvar * 2.0 * xc / d + gmean / d
        lead = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return record("layer_norm", (x, gamma, beta), out, bw)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    u = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return record("gelu", (a,), out, bw)


def masked_mean_pool(h, mask) -> Tensor:
    """Mean of rows where mask==1. h: [T,d] or [B,T,d]; mask: [T] or [B,T]."""
    h = _as_tensor(h)
    mask_arr = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=h.dtype)
    if h.ndim == 2:
        if mask_arr.shape != (h.shape[0],):
            raise ShapeError(f"mask shape {mask_arr.shape} != ({h.shape[0]},)")
        count = mask_arr.sum()
        if count <= 0:
            raise EmptySequenceError("masked_mean_pool: mask selects no positions")
        out = (h.data * mask_arr[:, None]).sum(axis=0) / count

        def bw(g):
            return (mask_arr[:, None] * (g[None, :] / count),)

        return record("masked_mean_pool", (h,), out, bw)
    if h.ndim == 3:
        if mask_arr.shape != h.shape[:2]:
            raise ShapeError(f"mask shape {mask_arr.shape} != {h.shape[:2]}")
        counts = mask_arr.sum(axis=1)
        if np.any(counts <= 0):
            raise EmptySequenceError("masked_mean_pool: a row has an all-zero mask")
        out = np.einsum("btd,bt->bd", h.data, mask_arr) / counts[:, None]

        def bw(g):
            return (mask_arr[:, :, None] * (g / counts[:, None])[:, None, :],)

        return record("masked_mean_pool", (h,), out, bw)
    raise ShapeError(f"masked_mean_pool expects 2-D or 3-D input, got {h.shape}")


def cross_entropy_rows(logits, targets) -> Tensor:
    """Per-row NLL of targets under log-softmax(logits). logits: [N,C]."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_rows expects [N,C] logits, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ContractError(f"target id out of range [0, {c})")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    rows = np.arange(n)
    out = (lse[:, 0] - logits.data[rows, targets]).astype(logits.dtype)

    def bw(g):
        p = np.exp(logits.data - lse)
        p[rows, targets] -= 1.0
        return (p * g[:, None],)

    return record("cross_entropy_rows", (logits,), out, bw)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    gate = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)

    def bw(g):
        return (g * gate,)

    return record("clamp", (a,), out, bw)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    a = _as_tensor(a)
    if rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate {rate} outside [0, 1)")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    out = a.data * keep

    def bw(g):
        return (g * keep,)

    return record("dropout", (a,), out, bw)
