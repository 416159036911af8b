"""Single-head attention stages between the conv encoder and the decoder.

Shapes use S segments, R reduced shots per segment and d the head size.
Masks are boolean numpy arrays; ``True`` marks a valid slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, Module


class AttentionParams(Module):
    """Query/key/value projections (no bias) sharing the head size."""

    def __init__(self, query_dim, key_dim, head_dim, rng):
        self.w_q = Linear(query_dim, head_dim, rng, bias=False)
        self.w_k = Linear(key_dim, head_dim, rng, bias=False)
        self.w_v = Linear(key_dim, head_dim, rng, bias=False)
        self.head_dim = head_dim


@dataclass
class FeatureMaps:
    c_v: T.Tensor
    c_s: T.Tensor
    c_q: T.Tensor
    c_sq: T.Tensor
    c_g: T.Tensor
    c_c: T.Tensor
    mask: np.ndarray
    segment_mask: np.ndarray
    lsa_weights: T.Tensor = None
    qgsa_weights: T.Tensor = None
    ga_weights: T.Tensor = None


def scaled_dot_attention(q, k, v, key_mask=None):
    """softmax(q k^T / sqrt(d)) v.

    ``key_mask`` broadcasts against the [..., Lq, Lk] weight matrix (a
    [..., Lk] mask should be passed as [..., 1, Lk]). Masked keys get exactly
    zero weight; a query row with no valid key raises ``ContractError``.
    Reductions over keys are order-independent, so permuting keys (with their
    values) leaves every output bit unchanged.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise T.DimensionError(f"attention: query dim {q.shape} and key dim {k.shape} differ")
    if k.shape[-2] != v.shape[-2]:
        raise T.DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    d = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    logits = T.mul(T.matmul(q, T.transpose(k, axes)), 1.0 / np.sqrt(d))
    weights = T.softmax(logits, axis=-1, mask=key_mask)
    return T.weighted_sum(weights, v), weights


def local_self_attention(c_v, params, mask):
    """Self-attention among the shots of each segment independently.

    A segment with no valid shot yields zero output and zero weights.
    """
    mask = np.asarray(mask, dtype=bool)
    empty = ~mask.any(axis=1)
    q = params.w_q(c_v)
    k = params.w_k(c_v)
    v = params.w_v(c_v)
    if not empty.any():
        return scaled_dot_attention(q, k, v, key_mask=mask[:, None, :])
    safe = mask.copy()
    safe[empty, 0] = True
    out, weights = scaled_dot_attention(q, k, v, key_mask=safe[:, None, :])
    keep = (~empty).astype(float)[:, None, None]
    out = T.mul(out, np.broadcast_to(keep, out.shape).copy())
    weights = T.mul(weights, np.broadcast_to(keep, weights.shape).copy())
    return out, weights


def query_guided_segment_attention(c_v, h_q, params, mask):
    """Query-guided per-shot features and their per-segment aggregate.

    The query vector is the only attention query of each segment. The per-shot
    feature of shot i is ``n_valid * w_i * v_i`` so that uniform weights leave
    the value untouched; the segment feature is the masked mean of those, i.e.
    the attention output ``sum_i w_i v_i``. Segments with no valid shot are
    returned with a zero feature and ``False`` in the segment mask.

    Returns ``(c_q, c_sq, segment_mask, weights)``.
    """
    mask = np.asarray(mask, dtype=bool)
    S, R = mask.shape
    counts = mask.sum(axis=1)
    segment_mask = counts > 0
    safe_mask = mask.copy()
    safe_mask[~segment_mask, 0] = True  # keeps softmax defined; output zeroed below

    h_q = T.as_tensor(h_q)
    q = params.w_q(T.reshape(h_q, (1, h_q.shape[-1])))  # [1, d]
    k = params.w_k(c_v)  # [S, R, d]
    v = params.w_v(c_v)
    _, weights = scaled_dot_attention(q, k, v, key_mask=safe_mask[:, None, :])  # weights [S, 1, R]
    d = v.shape[-1]

    per_shot = T.expand(T.transpose(weights, (0, 2, 1)), (S, R, d))
    scale = np.where(segment_mask, counts, 0).astype(float)[:, None, None]
    c_q = T.mul(T.mul(per_shot, v), np.broadcast_to(scale, (S, R, d)).copy())
    valid = np.broadcast_to(mask[:, :, None], (S, R, d)).astype(float)
    totals = T.sum(T.mul(c_q, valid), axis=1)  # [S, d]
    inv = np.where(segment_mask, 1.0 / np.maximum(counts, 1), 0.0)[:, None]
    c_sq = T.mul(totals, np.broadcast_to(inv, (S, d)).copy())
    return c_q, c_sq, segment_mask, weights


def global_attention(c_v, c_sq, params, segment_mask):
    """Every shot (all segments) attends over the segment-level features."""
    S, R, _ = c_v.shape
    q = params.w_q(c_v)  # [S, R, d]
    q = T.reshape(q, (S * R, q.shape[-1]))
    k = params.w_k(c_sq)  # [S, d]
    v = params.w_v(c_sq)
    out, weights = scaled_dot_attention(
        q, k, v, key_mask=np.asarray(segment_mask, dtype=bool)[None, :]
    )
    return T.reshape(out, (S, R, out.shape[-1])), weights


def concat_features(c_v, c_s, c_g):
    lead = c_v.shape[:-1]
    if c_s.shape[:-1] != lead or c_g.shape[:-1] != lead:
        raise T.DimensionError(
            f"concat_features: leading dims differ {c_v.shape}, {c_s.shape}, {c_g.shape}"
        )
    return T.concat([c_v, c_s, c_g], axis=-1)


class AttentionStack(Module):
    """LSA, QGSA and GA with their own parameters, producing C^c."""

    def __init__(self, visual_dim, query_dim, head_dim, rng):
        self.lsa = AttentionParams(visual_dim, visual_dim, head_dim, rng)
        self.qgsa = AttentionParams(query_dim, visual_dim, head_dim, rng)
        self.ga = AttentionParams(visual_dim, head_dim, head_dim, rng)

    def __call__(self, c_v, h_q, mask):
        c_s, w_s = local_self_attention(c_v, self.lsa, mask)
        c_q, c_sq, segment_mask, w_q = query_guided_segment_attention(c_v, h_q, self.qgsa, mask)
        c_g, w_g = global_attention(c_v, c_sq, self.ga, segment_mask)
        c_c = concat_features(c_v, c_s, c_g)
        return FeatureMaps(
            c_v=c_v, c_s=c_s, c_q=c_q, c_sq=c_sq, c_g=c_g, c_c=c_c,
            mask=np.asarray(mask, dtype=bool), segment_mask=segment_mask,
            lsa_weights=w_s, qgsa_weights=w_q, ga_weights=w_g,
        )
