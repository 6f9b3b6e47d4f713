"""Evaluation measures: Chamfer distance, F-score, IoU, TRE, rank-sum test.

Chamfer follows the symmetric mean nearest-neighbor form with unsquared
Euclidean distances; a squared variant is available behind a flag for
cross-toolkit comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .geometry import NnIndex, RigidTransform, as_points


def chamfer_l2(pred, gt, squared: bool = False) -> float:
    """Bidirectional mean NN distance (mm) between two clouds."""
    p = as_points(pred, "pred")
    g = as_points(gt, "gt")
    if len(p) == 0 or len(g) == 0:
        raise ValueError("clouds must be non-empty")
    d_pg, _ = NnIndex(g).query_batch(p)
    d_gp, _ = NnIndex(p).query_batch(g)
    if squared:
        return float(np.mean(d_pg**2) + np.mean(d_gp**2))
    return float(np.mean(d_pg) + np.mean(d_gp))


def f_score(pred, gt, d: float = 1.0) -> float:
    """Harmonic mean of precision/recall at distance threshold ``d`` (mm)."""
    p = as_points(pred, "pred")
    g = as_points(gt, "gt")
    if len(p) == 0 or len(g) == 0:
        raise ValueError("clouds must be non-empty")
    d_pg, _ = NnIndex(g).query_batch(p)
    d_gp, _ = NnIndex(p).query_batch(g)
    precision = float(np.mean(d_pg < d))
    recall = float(np.mean(d_gp < d))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def iou(occ_gt, occ_pred) -> float:
    """Intersection over union of boolean occupancy masks.

    Two all-zero masks agree perfectly and score 1.
    """
    a = np.asarray(occ_gt).astype(bool).ravel()
    b = np.asarray(occ_pred).astype(bool).ravel()
    if a.shape != b.shape:
        raise ValueError("occupancy masks differ in length")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass(frozen=True)
class FiducialSet:
    """Labeled landmark points (mm), paired across sets by id."""

    ids: tuple
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "points", as_points(self.points, "fiducials"))
        if len(self.ids) != len(self.points):
            raise ValueError("ids/points length mismatch")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("fiducial ids must be unique")

    @classmethod
    def from_points(cls, points) -> "FiducialSet":
        pts = as_points(points, "fiducials")
        return cls(tuple(f"f{i:03d}" for i in range(len(pts))), pts)


def tre(target: FiducialSet, source: FiducialSet, transform: RigidTransform) -> float:
    """Mean distance between target fiducials and transformed source ones (mm)."""
    if set(target.ids) != set(source.ids):
        raise ValueError("fiducial id sets do not match")
    order = {fid: i for i, fid in enumerate(source.ids)}
    src_pts = source.points[[order[fid] for fid in target.ids]]
    moved = transform.apply(src_pts)
    return float(np.mean(np.linalg.norm(target.points - moved, axis=1)))


# ---------------------------------------------------------------------------
# Wilcoxon rank-sum test


@dataclass(frozen=True)
class RankSumResult:
    statistic: float  # rank sum of the first sample
    p_value: float
    significant: bool


EXACT_LIMIT = 20  # exact enumeration when n + m is at most this


def wilcoxon_rank_sum(a, b, alpha: float = 0.05) -> RankSumResult:
    """Two-sided rank-sum test with average ranks for ties.

    Exact enumeration of all rank assignments for small samples
    (n + m <= 20), normal approximation with tie correction otherwise.
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    n, m = len(x), len(y)
    if n < 3 or m < 3:
        raise ValueError("each sample needs at least 3 observations")
    pooled = np.concatenate([x, y])
    ranks = _average_ranks(pooled)
    w = float(ranks[:n].sum())
    mu = n * (n + m + 1) / 2.0
    if n + m <= EXACT_LIMIT:
        p = _exact_two_sided(ranks, n, w, mu)
    else:
        p = _normal_two_sided(ranks, n, m, w, mu)
    return RankSumResult(statistic=w, p_value=p, significant=bool(p < alpha))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided(ranks: np.ndarray, n: int, w: float, mu: float) -> float:
    dev = abs(w - mu)
    total = 0
    extreme = 0
    for combo in combinations(range(len(ranks)), n):
        total += 1
        ws = ranks[list(combo)].sum()
        if abs(ws - mu) >= dev - 1e-12:
            extreme += 1
    return extreme / total


def _normal_two_sided(ranks, n, m, w, mu) -> float:
    big_n = n + m
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (big_n * (big_n - 1))
    var = n * m / 12.0 * ((big_n + 1) - tie_term)
    if var <= 0:
        return 1.0
    dev = abs(w - mu)
    z = max(dev - 0.5, 0.0) / math.sqrt(var)  # continuity correction
    return 2.0 * (1.0 - 0.5 * (1.0 + math.erf(z / math.sqrt(2.0))))
