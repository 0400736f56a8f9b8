"""Small module system and transformer building blocks on top of ``numerics``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .numerics import (
    Tensor,
    layer_norm,
    matmul,
    reshape,
    rotary,
    rotary_tables,
    silu,
    softmax,
    take_rows,
    transpose,
)


class Parameter(Tensor):
    """A module-owned leaf.  Freezing clears ``requires_grad`` but keeps it listed."""

    __slots__ = ()


def make_param(shape, rng: np.random.Generator | None, std: float, meta: bool = False,
               fill: float | None = None) -> Parameter:
    """Trainable leaf.  ``meta`` builds a zero-stride placeholder holding no memory."""
    shape = tuple(int(s) for s in shape)
    if meta:
        data = np.broadcast_to(np.float64(0.0), shape)
    elif fill is not None:
        data = np.full(shape, float(fill))
    else:
        data = rng.normal(0.0, std, size=shape)
    return Parameter(data, requires_grad=True)


class Module:
    """Parameters and child modules are discovered from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for m in val:
                    yield from m.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}


class LayerNorm(Module):
    def __init__(self, d: int, meta: bool = False, eps: float = 1e-5):
        self.gain = make_param((d,), None, 0.0, meta, fill=1.0)
        self.bias = make_param((d,), None, 0.0, meta, fill=0.0)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """Gated feed-forward: ``(silu(x W1) * (x W3)) W2``."""

    def __init__(self, d: int, hidden: int, rng, meta: bool = False, out_scale: float = 1.0):
        self.w1 = make_param((d, hidden), rng, d**-0.5, meta)
        self.w3 = make_param((d, hidden), rng, d**-0.5, meta)
        self.w2 = make_param((hidden, d), rng, out_scale * hidden**-0.5, meta)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(silu(matmul(x, self.w1)) * matmul(x, self.w3), self.w2)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return transpose(reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


class Attention(Module):
    """Multi-head attention without biases.

    Rotary position encoding is applied to queries and keys when ``use_rope``
    (self-attention); cross-attention leaves positions out.
    """

    def __init__(self, d: int, n_heads: int, rng, meta: bool = False,
                 use_rope: bool = True, out_scale: float = 1.0):
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.use_rope = use_rope
        std = d**-0.5
        self.wq = make_param((d, d), rng, std, meta)
        self.wk = make_param((d, d), rng, std, meta)
        self.wv = make_param((d, d), rng, std, meta)
        self.wo = make_param((d, d), rng, out_scale * std, meta)

    def __call__(self, x: Tensor, memory: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        """``mask`` is an additive (B|1, 1, Tq, Tk) array of 0 / -inf."""
        src = x if memory is None else memory
        h = self.n_heads
        q = _split_heads(matmul(x, self.wq), h)
        k = _split_heads(matmul(src, self.wk), h)
        v = _split_heads(matmul(src, self.wv), h)
        dh = q.shape[-1]
        if self.use_rope:
            cos, sin = _rope_cache(max(q.shape[2], k.shape[2]), dh)
            q = rotary(q, cos[: q.shape[2]], sin[: q.shape[2]])
            k = rotary(k, cos[: k.shape[2]], sin[: k.shape[2]])
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (dh**-0.5)
        if mask is not None:
            scores = scores + mask
        return matmul(_merge_heads(matmul(softmax(scores, axis=-1), v)), self.wo)


_ROPE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _rope_cache(t: int, dh: int):
    key = (t, dh)
    hit = _ROPE.get(key)
    if hit is None:
        hit = _ROPE[key] = rotary_tables(t, dh)
    return hit


def causal_mask(t: int) -> np.ndarray:
    m = np.zeros((1, 1, t, t))
    m[..., np.triu_indices(t, 1)[0], np.triu_indices(t, 1)[1]] = -np.inf
    return m


def key_padding_mask(lengths, t_k: int, t_q: int | None = None) -> np.ndarray:
    """Additive mask hiding key positions at or beyond each row's length."""
    lengths = np.asarray(lengths)
    hide = np.arange(t_k)[None, :] >= lengths[:, None]
    m = np.where(hide, -np.inf, 0.0)[:, None, None, :]
    if t_q is not None:
        m = np.broadcast_to(m, (len(lengths), 1, t_q, t_k))
    return m


class Embedding(Module):
    def __init__(self, n: int, d: int, rng, meta: bool = False, std: float = 1.0):
        self.weight = make_param((n, d), rng, std, meta)

    def __call__(self, ids) -> Tensor:
        return take_rows(self.weight, ids)
