"""Fused differentiable kernels: softmax family, normalization, losses, rotary."""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, _make, as_tensor


class DegenerateDistributionError(ValueError):
    """Every entry along the softmax axis was -inf."""


def _stable_shift(x: np.ndarray, axis: int) -> np.ndarray:
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NonFiniteError("softmax input contains NaN or +inf")
    m = x.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateDistributionError(
            "softmax over a slice whose entries are all -inf"
        )
    return x - m


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax; ``-inf`` entries come out as exact zeros."""
    x = as_tensor(x)
    e = np.exp(_stable_shift(x.data, axis))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = _stable_shift(x.data, axis)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw)


def cross_entropy(logits, targets, ignore_index: int | None = None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``.

    ``logits`` is ``(N, V)``.  Rows whose target equals ``ignore_index`` are
    left out of both the sum and the count.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} rows of logits")
    keep = np.ones(n, dtype=bool) if ignore_index is None else t != ignore_index
    tk = t[keep]
    if tk.size and (tk.min() < 0 or tk.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy with no counted targets")
    rows = np.nonzero(keep)[0]
    z = _stable_shift(logits.data[rows], -1)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(count), tk].sum() / count

    def bw(g):
        p = np.exp(logp)
        p[np.arange(count), tk] -= 1.0
        full = np.zeros((n, v))
        full[rows] = p * (float(g) / count)
        return (full,)

    return _make(np.asarray(loss), (logits,), bw)


def rotary_tables(seq_len: int, head_dim: int, base: float = 10000.0):
    """cos/sin tables of shape ``(seq_len, head_dim // 2)``."""
    if head_dim % 2:
        raise ShapeError(f"rotary embedding needs an even head dim, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent feature pairs of ``x`` (..., T, Dh) by position angle."""
    x = as_tensor(x)
    xd = x.data
    x1, x2 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def bw(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        return (gx,)

    return _make(out, (x,), bw)
