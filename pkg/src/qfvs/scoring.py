"""Shot scoring head, training loss and summary selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .layers import Linear, Module

CLAMP_EPS = 1e-7
SUMMARY_RATIO = 0.02


@dataclass
class ScoringConfig:
    visual_hidden: int = 512
    proj_dim: int = 300
    query_hidden: int = 300
    mlp_hidden: tuple = (256, 64)

    def __post_init__(self):
        self.mlp_hidden = tuple(int(v) for v in self.mlp_hidden)

    @property
    def fused_dim(self):
        return 4 * self.proj_dim

    @classmethod
    def test_profile(cls, **overrides):
        base = dict(visual_hidden=64, proj_dim=32, query_hidden=32, mlp_hidden=(32, 16))
        base.update(overrides)
        return cls(**base)


@dataclass
class ShotScores:
    """Scores of the valid shots in original (chronological) order."""

    scores: T.Tensor  # [N]
    mask: np.ndarray  # [S, T] validity of the segmented layout the scores came from

    def numpy(self):
        return self.scores.data


@dataclass
class Summary:
    indices: np.ndarray
    ratio: float
    scores: np.ndarray


def fuse(v, q):
    """[v + q ; v * q ; v ; q] along the last axis, with q broadcast over v's rows."""
    v, q = T.as_tensor(v), T.as_tensor(q)
    if q.ndim != 1 or v.shape[-1] != q.shape[0]:
        raise T.DimensionError(f"fuse: projected dims differ, {v.shape} vs {q.shape}")
    qb = T.expand(q, v.shape)
    return T.concat([T.add(v, qb), T.mul(v, qb), v, qb], axis=-1)


class ScoringHead(Module):
    def __init__(self, visual_dim, query_dim, cfg: ScoringConfig, rng):
        self.cfg = cfg
        self.visual1 = Linear(visual_dim, cfg.visual_hidden, rng)
        self.visual2 = Linear(cfg.visual_hidden, cfg.proj_dim, rng)
        self.query1 = Linear(query_dim, cfg.query_hidden, rng)
        self.query2 = Linear(cfg.query_hidden, cfg.proj_dim, rng)
        dims = (cfg.fused_dim, *cfg.mlp_hidden, 1)
        self.mlp = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def project_visual(self, x):
        return self.visual2(T.relu(self.visual1(x)))

    def project_query(self, h_q):
        h_q = T.as_tensor(h_q)
        q = self.query2(T.relu(self.query1(T.reshape(h_q, (1, h_q.shape[-1])))))
        return T.reshape(q, (q.shape[-1],))

    def score_rows(self, rows, h_q):
        """Scores for a [N, visual_dim] block of shot features."""
        x = fuse(self.project_visual(rows), self.project_query(h_q))
        for i, layer in enumerate(self.mlp):
            x = layer(x)
            if i < len(self.mlp) - 1:
                x = T.relu(x)
        return T.reshape(T.sigmoid(x), (rows.shape[0],))


def valid_slots(mask):
    return np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))


def score_shots(c_l, h_q, head: ScoringHead):
    """Score every valid slot of ``c_l`` (LearnedShotFeatures); padding yields no score."""
    feats = c_l.c_l
    S, length, C = feats.shape
    rows = T.take(T.reshape(feats, (S * length, C)), valid_slots(c_l.mask), axis=0)
    return ShotScores(scores=head.score_rows(rows, h_q), mask=c_l.mask)


def bce_loss(scores, labels, eps=CLAMP_EPS):
    """Mean negative log-likelihood of binary ``labels`` under ``scores``.

    ``scores`` is a Tensor (or ShotScores) over the valid shots; values are
    clamped to [eps, 1 - eps] before the logarithms.
    """
    if isinstance(scores, ShotScores):
        scores = scores.scores
    scores = T.as_tensor(scores)
    labels = np.asarray(labels, dtype=float).reshape(scores.shape)
    if scores.size == 0:
        raise T.ContractError("bce_loss: no valid shots")
    g = T.clamp(scores, eps, 1.0 - eps)
    pos = T.mul(T.log(g), labels)
    neg = T.mul(T.log(T.sub(1.0, g)), 1.0 - labels)
    return T.mul(T.mean(T.add(pos, neg)), -1.0)


def summary_length(n_valid, ratio=SUMMARY_RATIO):
    return max(1, math.floor(Fraction(repr(float(ratio))) * int(n_valid)))


def select_summary(scores, ratio=SUMMARY_RATIO) -> Summary:
    """Top ``ratio`` of shots by score (earlier index wins ties), returned chronologically."""
    if isinstance(scores, ShotScores):
        scores = scores.numpy()
    scores = np.asarray(getattr(scores, "data", scores), dtype=float).reshape(-1)
    if scores.size == 0:
        raise T.ContractError("select_summary: no valid shots")
    k = summary_length(scores.size, ratio)
    order = np.lexsort((np.arange(scores.size), -scores))
    chosen = np.sort(order[:k])
    return Summary(indices=chosen, ratio=float(ratio), scores=scores[chosen])
