"""Tag-overlap summary evaluation via maximum-weight bipartite matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


def iou(a, b):
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def max_weight_matching(weights):
    """Pairs ``(row, col, weight)`` of a maximum-weight matching.

    Rectangular inputs are padded with zero-weight dummies to a square matrix
    and solved with the Hungarian algorithm. Zero-weight pairs are dropped.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weight matrix must be 2-D, got shape {w.shape}")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    rows, cols = w.shape
    n = max(rows, cols)
    if n == 0:
        return []
    square = np.zeros((n, n))
    square[:rows, :cols] = w
    assign = _kernels.hungarian(-square)
    pairs = []
    for r in range(rows):
        c = int(assign[r])
        if c < cols and w[r, c] > 0:
            pairs.append((r, c, float(w[r, c])))
    return pairs


def matching_total(pairs):
    return math.fsum(p[2] for p in pairs)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    pairs: list = field(default_factory=list)  # (gt_shot, machine_shot, weight)
    n_gt: int = 0
    n_machine: int = 0
    flags: tuple = ()

    def to_lines(self, prefix=""):
        lines = [
            f"{prefix}precision = {self.precision!r}",
            f"{prefix}recall = {self.recall!r}",
            f"{prefix}f1 = {self.f1!r}",
            f"{prefix}n_gt = {self.n_gt}",
            f"{prefix}n_machine = {self.n_machine}",
            f"{prefix}flags = {','.join(self.flags)}",
        ]
        lines += [f"{prefix}pair = {g},{m},{w!r}" for g, m, w in self.pairs]
        return lines


def f1_score(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def evaluate_summary(gt, machine, tags):
    """Precision/recall/F1 of ``machine`` against ``gt`` shot indices.

    ``tags`` maps a shot index to its concept tag set (a list indexed by shot
    works). Edge weights are tag-set IoUs.
    """
    gt = [int(i) for i in gt]
    machine = [int(i) for i in machine]
    flags = []
    if not gt:
        flags.append("empty-ground-truth")
    if not machine:
        flags.append("empty-machine-summary")
    if flags:
        return EvalReport(0.0, 0.0, 0.0, [], len(gt), len(machine), tuple(flags))
    weights = np.array([[iou(tags[g], tags[m]) for m in machine] for g in gt])
    matched = max_weight_matching(weights)
    pairs = [(gt[r], machine[c], w) for r, c, w in matched]
    total = matching_total(matched)
    p = total / len(machine)
    r = total / len(gt)
    return EvalReport(p, r, f1_score(p, r), pairs, len(gt), len(machine), ())
