"""Low-rank decomposed self-attention and the vanilla baseline.

Instead of scoring every key against every query (L x L), items are
softly assigned to a small set of learned interest prototypes; keys and
values are aggregated per interest, and queries attend over those P
aggregates (L x P).  Cost per head is linear in sequence length.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParameterStore, Tensor

log = logging.getLogger(__name__)


@dataclass
class LsaParams:
    theta: Tensor | None       # [P, D] interest prototypes (None for vanilla)
    w_q: Tensor                # [D, D]
    w_k: Tensor                # [D, D]
    w_v: Tensor                # [D, D]
    n_heads: int
    n_interests: int
    per_head_theta: bool = False


def init_lsa(store: ParameterStore, prefix: str, d_model: int, n_interests: int,
             n_heads: int, with_theta: bool = True,
             per_head_theta: bool = False) -> LsaParams:
    if d_model % n_heads:
        raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    theta = None
    if with_theta:
        if per_head_theta:
            d_head = d_model // n_heads
            theta = store.uniform(f"{prefix}.theta",
                                  (n_heads * n_interests, d_head), d_head)
        else:
            theta = store.uniform(f"{prefix}.theta", (n_interests, d_model), d_model)
    w_q = store.uniform(f"{prefix}.w_q", (d_model, d_model), d_model)
    w_k = store.uniform(f"{prefix}.w_k", (d_model, d_model), d_model)
    w_v = store.uniform(f"{prefix}.w_v", (d_model, d_model), d_model)
    return LsaParams(theta, w_q, w_k, w_v, n_heads, n_interests, per_head_theta)


def interest_aggregate(hmat: Tensor, theta: Tensor) -> tuple[Tensor, Tensor]:
    """Soft-assign each row of hmat to interests, then pool rows per interest.

    Returns (z, pooled): z[t] is a distribution over interests for row t
    (softmax of hmat @ theta^T), pooled = z^T @ hmat with one row per
    interest.
    """
    z = T.softmax(T.matmul(hmat, T.transpose_last(theta)), axis=-1)
    pooled = T.matmul(T.transpose_last(z), hmat)
    return z, pooled


def _split_heads(x: Tensor, n_heads: int) -> list[Tensor]:
    d_head = x.shape[-1] // n_heads
    return [T.slice_last(x, i * d_head, (i + 1) * d_head) for i in range(n_heads)]


def lsa_attention(x: Tensor, p: LsaParams) -> Tensor:
    """Attention through the interest bottleneck; [.., L, D] -> same shape.

    One assignment z is computed from the keys and reused to pool both
    keys and values; each head then attends over its slice of the P
    pooled rows.
    """
    if p.theta is None:
        raise ValueError("lsa_attention requires interest prototypes")
    d_model = x.shape[-1]
    d_head = d_model // p.n_heads
    seq_len = x.shape[-2]
    if p.n_interests >= seq_len:
        log.info("interest count %d >= sequence length %d; no rank reduction",
                 p.n_interests, seq_len)
    q = T.matmul(x, p.w_q)
    k = T.matmul(x, p.w_k)
    v = T.matmul(x, p.w_v)
    inv_scale = 1.0 / np.sqrt(d_head)
    outs = []
    if p.per_head_theta:
        qs = _split_heads(q, p.n_heads)
        ks = _split_heads(k, p.n_heads)
        vs = _split_heads(v, p.n_heads)
        for i in range(p.n_heads):
            theta_i = T.slice_last(
                T.transpose_last(p.theta), i * p.n_interests,
                (i + 1) * p.n_interests)  # [d_head, P] column block
            zi = T.softmax(T.matmul(ks[i], theta_i), axis=-1)
            zit = T.transpose_last(zi)
            k_pool = T.matmul(zit, ks[i])
            v_pool = T.matmul(zit, vs[i])
            attn = T.softmax(
                T.scale(T.matmul(qs[i], T.transpose_last(k_pool)), inv_scale),
                axis=-1)
            outs.append(T.matmul(attn, v_pool))
        return T.concat_last(outs)
    z, k_pool = interest_aggregate(k, p.theta)
    v_pool = T.matmul(T.transpose_last(z), v)
    for qi, kpi, vpi in zip(_split_heads(q, p.n_heads),
                            _split_heads(k_pool, p.n_heads),
                            _split_heads(v_pool, p.n_heads)):
        attn = T.softmax(
            T.scale(T.matmul(qi, T.transpose_last(kpi)), inv_scale), axis=-1)
        outs.append(T.matmul(attn, vpi))
    return T.concat_last(outs)


def vanilla_attention(x: Tensor, p: LsaParams) -> Tensor:
    """Standard multi-head attention over all positions (no mask)."""
    d_head = x.shape[-1] // p.n_heads
    q = T.matmul(x, p.w_q)
    k = T.matmul(x, p.w_k)
    v = T.matmul(x, p.w_v)
    inv_scale = 1.0 / np.sqrt(d_head)
    outs = []
    for qi, ki, vi in zip(_split_heads(q, p.n_heads),
                          _split_heads(k, p.n_heads),
                          _split_heads(v, p.n_heads)):
        attn = T.softmax(
            T.scale(T.matmul(qi, T.transpose_last(ki)), inv_scale), axis=-1)
        outs.append(T.matmul(attn, vi))
    return T.concat_last(outs)
