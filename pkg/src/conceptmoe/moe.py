"""Sparse expert mixture: Top-K softmax gating over feed-forward experts.

For a token ``x`` with gate matrix ``W_g`` the layer computes

    logits  = x W_g
    weights = softmax(logits with every entry outside the K largest set to -inf)
    output  = sum_i weights_i * E_i(x)

and evaluates only the K experts with nonzero weight.  Ties in the Top-K
selection go to the lower expert index.  The selection itself is treated as
constant when differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError
from .nn import FeedForward, Module, make_param
from .numerics import (
    NonFiniteError,
    Tensor,
    as_tensor,
    concat,
    matmul,
    mul,
    reshape,
    scatter_rows,
    softmax,
    take_rows,
    where_const,
)


@dataclass
class GateOutput:
    logits: np.ndarray    # (..., n)
    selected: np.ndarray  # (..., K) expert ids, strongest first
    weights: np.ndarray   # (..., n), exactly K nonzeros per row


def topk_mask(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean mask of the K largest logits per row, and their indices."""
    flat = np.ascontiguousarray(logits.reshape(-1, logits.shape[-1]), dtype=np.float64)
    sel = kernels.topk_indices(flat, k)
    mask = np.zeros(flat.shape, dtype=bool)
    mask[np.arange(flat.shape[0])[:, None], sel] = True
    return mask.reshape(logits.shape), sel.reshape(logits.shape[:-1] + (k,))


class ExpertMixtureLayer(Module):
    def __init__(self, d_model: int, ffn_dim: int, n_experts: int = 8, top_k: int = 2,
                 rng: np.random.Generator | None = None, meta: bool = False,
                 out_scale: float = 1.0):
        if not 1 <= top_k <= n_experts:
            raise ConfigError(f"top_k must lie in [1, {n_experts}], got {top_k}")
        if rng is None and not meta:
            rng = np.random.default_rng(0)
        self.d_model = d_model
        self.ffn_dim = ffn_dim
        self.n_experts = n_experts
        self.top_k = top_k
        self.gate_weights = make_param((d_model, n_experts), rng, d_model**-0.5, meta)
        self.experts = [
            FeedForward(d_model, ffn_dim, rng, meta, out_scale) for _ in range(n_experts)
        ]
        self.utilization = np.zeros(n_experts, dtype=np.int64)

    def gate(self, x) -> GateOutput:
        """Gate decision for one token ``(d,)`` or a batch ``(..., d)``."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.shape[-1] != self.d_model:
            raise ConfigError(f"token width {x.shape[-1]} != d_model {self.d_model}")
        logits = x @ self.gate_weights.data
        mask, sel = topk_mask(logits, self.top_k)
        masked = np.where(mask, logits, -np.inf)
        z = masked - masked.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return GateOutput(logits, sel, e / e.sum(axis=-1, keepdims=True))

    def __call__(self, x, token_mask: np.ndarray | None = None) -> Tensor:
        """Route every token of ``x`` (..., d_model) through its K experts.

        Positions where ``token_mask`` is false are skipped and produce zeros.
        """
        x = as_tensor(x)
        lead = x.shape[:-1]
        d = self.d_model
        if x.shape[-1] != d:
            raise ConfigError(f"token width {x.shape[-1]} != d_model {d}")
        n_tok = int(np.prod(lead)) if lead else 1
        xf = reshape(x, (n_tok, d))
        rows = np.arange(n_tok) if token_mask is None else np.nonzero(np.asarray(token_mask).reshape(-1))[0]
        if rows.size == 0:
            return reshape(mul(xf, 0.0), x.shape)
        xr = xf if rows.size == n_tok else take_rows(xf, rows)
        logits = matmul(xr, self.gate_weights)
        mask, _ = topk_mask(logits.data, self.top_k)
        gates = softmax(where_const(mask, logits, -np.inf), axis=-1)
        self.utilization += mask.sum(axis=0)

        parts, where = [], []
        for i, expert in enumerate(self.experts):
            local = np.nonzero(mask[:, i])[0]
            if local.size == 0:
                continue
            xi = take_rows(xr, local)
            yi = expert(xi)
            if not np.all(np.isfinite(yi.data)):
                bad = int(rows[local[np.nonzero(~np.isfinite(yi.data).all(axis=-1))[0][0]]])
                pos = np.unravel_index(bad, lead) if lead else ()
                raise NonFiniteError(f"expert {i} produced non-finite output at token {tuple(int(p) for p in pos)}")
            gi = take_rows(gates, local)[:, i : i + 1]
            parts.append(yi * gi)
            where.append(rows[local])
        out = scatter_rows(n_tok, np.concatenate(where), concat(parts, axis=0))
        return reshape(out, x.shape)

    def reset_utilization(self) -> None:
        self.utilization[:] = 0


def expert_param_count(d_model: int, ffn_dim: int) -> int:
    return 3 * d_model * ffn_dim


def count_params(layer: ExpertMixtureLayer) -> tuple[int, int]:
    """(total, active-per-token) parameters of one layer."""
    gate = layer.d_model * layer.n_experts
    per = expert_param_count(layer.d_model, layer.ffn_dim)
    return gate + layer.n_experts * per, gate + layer.top_k * per
