"""Retrieval metrics: R@K, median rank, mean rank, both directions.

Rank ties are broken pessimally by index: an item tied with the ground
truth but at a lower index counts as ranked above it, which keeps metrics
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError


@dataclass
class EvalReport:
    r1: float
    r5: float
    r10: float
    mdr: float
    mnr: float
    direction: str
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "r1": self.r1, "r5": self.r5, "r10": self.r10,
            "mdr": self.mdr, "mnr": self.mnr,
            "direction": self.direction, "n_queries": self.n_queries,
        }


def rank_of(scores, gt_index: int) -> int:
    """1-based rank of the ground-truth candidate under stable descending order."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise DataError(f"rank_of expects a vector, got shape {s.shape}")
    if not 0 <= gt_index < s.shape[0]:
        raise DataError(f"rank_of: gt_index {gt_index} outside [0, {s.shape[0]})")
    if not np.all(np.isfinite(s)):
        raise NumericError("rank_of: non-finite score")
    gt_score = s[gt_index]
    greater = int(np.count_nonzero(s > gt_score))
    ties_before = int(np.count_nonzero(s[:gt_index] == gt_score))
    return 1 + greater + ties_before


def compute_metrics(scores, gt: dict[int, int], direction: str) -> EvalReport:
    """Metrics over a (G videos x H queries) score matrix.

    ``gt`` maps query column -> ground-truth video row. For t2v each query
    (column) ranks the videos. For v2t each video ranks the queries; a
    video with several captions scores the minimum rank over them
    (multiple-caption protocol, experimental).
    """
    r = np.asarray(scores, dtype=np.float64)
    if r.ndim != 2:
        raise DataError(f"compute_metrics expects a matrix, got shape {r.shape}")
    g, h = r.shape
    if direction == "t2v":
        ranks = []
        for j in range(h):
            if j not in gt:
                raise DataError(f"query column {j} has no ground-truth video")
            ranks.append(rank_of(r[:, j], gt[j]))
    elif direction == "v2t":
        captions: dict[int, list[int]] = {}
        for q, vid in gt.items():
            if not 0 <= vid < g:
                raise DataError(f"ground-truth video row {vid} outside [0, {g})")
            captions.setdefault(vid, []).append(q)
        ranks = []
        for i in range(g):
            if i not in captions:
                raise DataError(f"video row {i} has no ground-truth query")
            ranks.append(min(rank_of(r[i, :], q) for q in captions[i]))
    else:
        raise DataError(f"unknown direction '{direction}'")
    arr = np.array(ranks)
    n = arr.size
    return EvalReport(
        r1=100.0 * float(np.count_nonzero(arr <= 1)) / n,
        r5=100.0 * float(np.count_nonzero(arr <= 5)) / n,
        r10=100.0 * float(np.count_nonzero(arr <= 10)) / n,
        mdr=float(np.sort(arr)[(n - 1) // 2]),  # lower middle for even counts
        mnr=float(arr.mean()),
        direction=direction,
        n_queries=n,
    )
