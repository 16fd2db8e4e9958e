"""Attention mechanisms: spatial attention over feature maps conditioned on
a pathology vector, and multi-query attention that fuses retrieved items
into a single template representation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


@dataclass
class SpatialAttentionParams:
    w_feat: Tensor   # (A, d)
    w_cond: Tensor   # (A, q)
    w_score: Tensor  # (1, A)


@dataclass
class SpatialAttention:
    scores: Tensor   # (k, k) raw
    weights: Tensor  # (k, k) softmax-normalized over all cells


@dataclass
class MultiQueryParams:
    w_key: Tensor    # (d, d)
    w_value: Tensor  # (d, d)
    w_out: Tensor    # (d, (n+m)*d)


@dataclass
class QuerySet:
    """Exactly n+m query vectors: keyword embeddings then disease embeddings.

    Unfilled keyword slots are zero vectors so the output projection keeps a
    static shape.
    """

    matrix: Tensor  # (n+m, d)
    n_keywords: int
    m_diseases: int


def init_spatial_attention(
    store: ParameterStore,
    prefix: str,
    rng: np.random.Generator,
    feat_dim: int,
    cond_dim: int,
    attn_hidden: int,
) -> SpatialAttentionParams:
    return SpatialAttentionParams(
        w_feat=store.add(f"{prefix}.w_feat", ad.uniform_init(rng, (attn_hidden, feat_dim), feat_dim)),
        w_cond=store.add(f"{prefix}.w_cond", ad.uniform_init(rng, (attn_hidden, cond_dim), cond_dim)),
        w_score=store.add(f"{prefix}.w_score", ad.uniform_init(rng, (1, attn_hidden), attn_hidden)),
    )


def init_multi_query(
    store: ParameterStore,
    prefix: str,
    rng: np.random.Generator,
    d: int,
    n_queries: int,
) -> MultiQueryParams:
    return MultiQueryParams(
        w_key=store.add(f"{prefix}.w_key", ad.uniform_init(rng, (d, d), d)),
        w_value=store.add(f"{prefix}.w_value", ad.uniform_init(rng, (d, d), d)),
        w_out=store.add(f"{prefix}.w_out", ad.uniform_init(rng, (d, n_queries * d), n_queries * d)),
    )


def spatial_scores(feature_map: Tensor, condition: Tensor, p: SpatialAttentionParams) -> SpatialAttention:
    """Per-cell attention scores conditioned on a pathology/hidden vector.

    score(x, y) = w_score . tanh(W_feat map(x, y) + W_cond condition), then
    softmax over all k*k cells.
    """
    k1, k2, d = feature_map.shape
    if condition.shape != (p.w_cond.shape[1],):
        raise ad.ShapeError(
            f"spatial_scores: condition {condition.shape} vs w_cond {p.w_cond.shape}"
        )
    cells = ad.reshape(feature_map, (k1 * k2, d))
    pre = ad.add(ad.linear(cells, p.w_feat), ad.linear(condition, p.w_cond))
    raw = ad.linear(ad.tanh(pre), p.w_score)        # (k*k, 1)
    flat = ad.reshape(raw, (k1 * k2,))
    weights = ad.softmax(flat, axis=0)
    return SpatialAttention(
        scores=ad.reshape(flat, (k1, k2)),
        weights=ad.reshape(weights, (k1, k2)),
    )


def attend_spatial(feature_map: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum of feature-map cells: sum_xy alpha(x, y) map(x, y)."""
    k1, k2, d = feature_map.shape
    flat_map = ad.reshape(feature_map, (k1 * k2, d))
    flat_w = ad.reshape(weights, (k1 * k2,))
    return ad.matmul(flat_w, flat_map)


def fuse_views(attended, w_fuse: Tensor) -> Tensor:
    """Fuse b attended view vectors: concat(v'_1..v'_b) @ W_f, W_f (b*d, d)."""
    if len(attended) * attended[0].shape[0] != w_fuse.shape[0]:
        raise ad.ValidationError(
            f"fuse_views: got {len(attended)} views of dim {attended[0].shape[0]}, "
            f"fusion weight expects total {w_fuse.shape[0]}"
        )
    return ad.matmul(ad.concat(list(attended), axis=0), w_fuse)


def build_query_set(
    keyword_embeddings: Tensor | None,
    disease_embeddings: Tensor,
    n_keywords: int,
    d: int,
) -> QuerySet:
    """Assemble the fixed-size query matrix, zero-padding missing keywords."""
    parts = []
    found = 0
    if keyword_embeddings is not None:
        found = keyword_embeddings.shape[0]
        if found > n_keywords:
            raise ad.ValidationError(f"{found} keyword embeddings but only {n_keywords} slots")
        parts.append(keyword_embeddings)
    if found < n_keywords:
        parts.append(Tensor(np.zeros((n_keywords - found, d))))
    parts.append(disease_embeddings)
    return QuerySet(
        matrix=ad.concat(parts, axis=0),
        n_keywords=n_keywords,
        m_diseases=disease_embeddings.shape[0],
    )


def multi_query_attention(
    queries: QuerySet,
    anchor: Tensor,
    values,
    p: MultiQueryParams,
    return_weights: bool = False,
):
    """Fuse retrieved items into one d-dim template vector.

    Each of the n+m queries attends over per-item keys K_j = (v_j + anchor) W^K
    and projected values V_j = v_j W^V; the attended vectors are concatenated
    and projected by W^O. The anchor (image feature at report level, decoder
    hidden state at sentence level) conditions every key.
    """
    if not values:
        raise ad.ValidationError("multi_query_attention: empty value list")
    d = anchor.shape[0]
    value_mat = ad.concat([ad.reshape(v, (1, d)) for v in values], axis=0)  # (L, d)
    keys = ad.matmul(ad.add(value_mat, anchor), p.w_key)                    # (L, d)
    projected = ad.matmul(value_mat, p.w_value)                             # (L, d)
    logits = ad.mul(ad.matmul(queries.matrix, ad.transpose(keys, (1, 0))), 1.0 / math.sqrt(d))
    weights = ad.softmax(logits, axis=1)                                    # (Q, L)
    attended = ad.matmul(weights, projected)                                # (Q, d)
    flat = ad.reshape(attended, (attended.shape[0] * d,))
    out = ad.linear(flat, p.w_out)
    if return_weights:
        return out, weights.data.copy()
    return out
