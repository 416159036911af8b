"""Kernel temporal segmentation of a shot sequence and the padded segment layout."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import ContractError

MAX_SEGMENTS = 20
MAX_SHOTS = 200


@dataclass(frozen=True)
class SegmentBoundaries:
    starts: tuple
    lengths: tuple

    @property
    def n_shots(self):
        return int(sum(self.lengths))

    @property
    def change_points(self):
        """Start index of every segment after the first (= exclusive end of the previous)."""
        return tuple(self.starts[1:])

    @classmethod
    def from_change_points(cls, change_points, n):
        edges = [0, *[int(c) for c in change_points], int(n)]
        return cls(tuple(edges[:-1]), tuple(b - a for a, b in zip(edges[:-1], edges[1:])))

    def validate(self, n=None, max_shots=None):
        n = self.n_shots if n is None else n
        pos = 0
        for start, length in zip(self.starts, self.lengths):
            if start != pos or length < 1:
                raise ContractError(f"segments do not partition [0, {n}): {self.starts}/{self.lengths}")
            if max_shots is not None and length > max_shots:
                raise ContractError(f"segment at {start} has {length} shots, more than {max_shots}")
            pos += length
        if pos != n:
            raise ContractError(f"segments cover {pos} shots, expected {n}")


def cosine_gram(features):
    x = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms > 0, norms, 1.0)
    return x @ x.T


def scatter_matrix(gram):
    """scatter[i, j] = within-segment scatter of shots [i, j) in kernel space (0 for j <= i)."""
    return _kernels.scatter(gram)


def segments_cost(scatter, change_points):
    edges = [0, *change_points, scatter.shape[0] - 1]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        total += scatter[a, b]
    return total


def best_split(scatter, n_change_points):
    """Minimum-cost placement of exactly ``n_change_points`` by dynamic programming."""
    n = scatter.shape[0] - 1
    cost, back = _kernels.segment_dp(scatter, n_change_points)
    return _backtrack(back, n_change_points, n), float(cost[n_change_points, n])


def exhaustive_split(scatter, n_change_points):
    """Brute-force reference for :func:`best_split` (small N only)."""
    n = scatter.shape[0] - 1
    best, best_cps = np.inf, ()
    for cps in itertools.combinations(range(1, n), n_change_points):
        c = segments_cost(scatter, cps)
        if c < best:
            best, best_cps = c, cps
    return best_cps, best


def _backtrack(back, m, n):
    cps = []
    j = n
    for level in range(m, 0, -1):
        i = int(back[level, j])
        cps.append(i)
        j = i
    return tuple(reversed(cps))


def kts_segment(features, max_segments=MAX_SEGMENTS, max_shots=MAX_SHOTS, penalty=1.0):
    """Group shots into non-overlapping segments.

    The number of change points m minimises ``scatter(m) + penalty * m * log N``
    over m <= max_segments - 1. Segments longer than ``max_shots`` are then
    split evenly. When N > max_segments * max_shots the shot cap wins and more
    than ``max_segments`` segments are returned.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"kts_segment: need a non-empty [N, C] feature matrix, got {x.shape}")
    n = x.shape[0]
    max_cp = max(0, min(max_segments - 1, n - 1))
    scatter = scatter_matrix(cosine_gram(x))
    cost, back = _kernels.segment_dp(scatter, max_cp)
    del scatter
    objective = cost[:, n] + penalty * np.arange(max_cp + 1) * math.log(n)
    m = int(np.argmin(objective))
    bounds = SegmentBoundaries.from_change_points(_backtrack(back, m, n), n)
    return split_oversized(bounds, max_shots)


def split_oversized(bounds: SegmentBoundaries, max_shots):
    starts, lengths = [], []
    for start, length in zip(bounds.starts, bounds.lengths):
        parts = -(-length // max_shots)
        base, extra = divmod(length, parts)
        pos = start
        for p in range(parts):
            size = base + (1 if p < extra else 0)
            starts.append(pos)
            lengths.append(size)
            pos += size
    return SegmentBoundaries(tuple(starts), tuple(lengths))


@dataclass
class SegmentedVideo:
    features: np.ndarray  # [S, T, C], zero padded
    mask: np.ndarray  # [S, T]
    boundaries: SegmentBoundaries

    @property
    def n_shots(self):
        return int(self.mask.sum())

    def shot_index(self):
        """Original shot index of every slot (-1 for padding), shape [S, T]."""
        idx = np.full(self.mask.shape, -1, dtype=np.int64)
        for s, (start, length) in enumerate(zip(self.boundaries.starts, self.boundaries.lengths)):
            idx[s, :length] = np.arange(start, start + length)
        return idx


def build_segmented(features, boundaries: SegmentBoundaries, T=MAX_SHOTS):
    x = np.asarray(features, dtype=np.float64)
    boundaries.validate(x.shape[0], max_shots=T)
    S = len(boundaries.starts)
    out = np.zeros((S, T, x.shape[1]))
    mask = np.zeros((S, T), dtype=bool)
    for s, (start, length) in enumerate(zip(boundaries.starts, boundaries.lengths)):
        out[s, :length] = x[start:start + length]
        mask[s, :length] = True
    return SegmentedVideo(out, mask, boundaries)


def flatten(segmented: SegmentedVideo):
    return segmented.features[segmented.mask]


def write_boundaries(path, bounds: SegmentBoundaries):
    with open(path, "w") as fh:
        fh.writelines(f"{s}\n" for s in bounds.starts)


def read_boundaries(path, n):
    with open(path) as fh:
        starts = [int(line) for line in fh if line.strip()]
    if not starts or starts[0] != 0:
        raise ValueError(f"{path}: first segment must start at 0")
    return SegmentBoundaries.from_change_points(starts[1:], n)
