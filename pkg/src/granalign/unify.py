"""Sinkhorn-Knopp marginal normalization and fusion of level score matrices.

The iteration balances exp(S) against uniform marginals and keeps only the
log-domain video bias; the query-side scaling exists to shape the video
bias and is discarded. Adding the bias to a test matrix row-shifts it so
that no video is systematically over- or under-represented across
queries. Levels are normalized separately and then summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

LEVELS = ("vs", "fs", "pw")


@dataclass
class ScoreMatrix:
    """G x H score values with the video/query ids they are indexed by."""

    values: np.ndarray
    row_ids: list[str]
    col_ids: list[str]
    level: str  # "vs" | "fs" | "pw" | "r"

    def validate(self) -> "ScoreMatrix":
        if self.values.ndim != 2:
            raise DataError(f"score matrix '{self.level}' must be 2-D, got {self.values.shape}")
        g, h = self.values.shape
        if len(self.row_ids) != g or len(self.col_ids) != h:
            raise DataError(
                f"score matrix '{self.level}': id lengths ({len(self.row_ids)}, "
                f"{len(self.col_ids)}) do not match shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"score matrix '{self.level}' contains non-finite values")
        return self


@dataclass
class SkBias:
    """Log-domain per-video additive correction."""

    alpha: np.ndarray  # (G,)
    iters_used: int


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis=axis)


def _sinkhorn_log(s_ref, n_iter: int) -> tuple[np.ndarray, np.ndarray]:
    """Balancing iteration carried in the log domain.

    Mathematically identical to the linear-domain alternation
    beta = 1/colsum(L); repeat {alpha = 1/(L beta); beta = 1/(alpha L)}
    with L = exp(S - max(S)), but immune to the geometric magnitude drift
    the raw iterates develop on rectangular matrices (a factor ~J/G per
    iteration), which would otherwise under/overflow. The global max
    shift changes log(alpha) only by an additive constant, which never
    affects per-column ranking.
    """
    s = np.asarray(s_ref, dtype=np.float64)
    if s.ndim != 2:
        raise DataError(f"sinkhorn: expected a matrix, got shape {s.shape}")
    if n_iter < 1:
        raise DataError(f"sinkhorn: n_iter must be >= 1, got {n_iter}")
    if not np.all(np.isfinite(s)):
        raise DataError("sinkhorn: non-finite reference scores")
    log_l = s - s.max()
    log_beta = -_logsumexp(log_l, axis=0)
    log_alpha = np.zeros(s.shape[0])
    for _ in range(n_iter):
        log_alpha = -_logsumexp(log_l + log_beta[None, :], axis=1)
        log_beta = -_logsumexp(log_l + log_alpha[:, None], axis=0)
    if not (np.all(np.isfinite(log_alpha)) and np.all(np.isfinite(log_beta))):
        raise NumericError("sinkhorn: iteration produced non-finite biases")
    return log_alpha, log_beta


def sinkhorn_alpha_beta(s_ref, n_iter: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw balancing pair (alpha, beta) after the final beta update.

    Exposed for verification: with L = exp(S - max(S)),
    diag(alpha) @ L @ diag(beta) has unit column sums for any n_iter >= 1.
    """
    log_alpha, log_beta = _sinkhorn_log(s_ref, n_iter)
    return np.exp(log_alpha), np.exp(log_beta)


def sinkhorn_bias(s_ref, n_iter: int = 4) -> SkBias:
    """Video bias log(alpha) from a (test videos x reference queries) matrix."""
    log_alpha, _ = _sinkhorn_log(s_ref, n_iter)
    return SkBias(alpha=log_alpha, iters_used=n_iter)


def apply_bias(s_test, bias: SkBias) -> np.ndarray:
    """Shift row i of the test matrix by alpha[i]."""
    s = np.asarray(s_test, dtype=np.float64)
    if s.ndim != 2:
        raise DataError(f"apply_bias: expected a matrix, got shape {s.shape}")
    if bias.alpha.shape != (s.shape[0],):
        raise DataError(
            f"apply_bias: bias length {bias.alpha.shape[0]} != row count {s.shape[0]}"
        )
    return s + bias.alpha[:, None]


@dataclass
class UnifyResult:
    scores: ScoreMatrix
    normalized: bool
    self_reference: bool
    n_iter: int
    level_biases: dict[str, SkBias] = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "normalized": self.normalized,
            "self_reference": self.self_reference,
            "n_iter": self.n_iter,
        }


def unify_levels(
    levels: list[ScoreMatrix],
    refs: list[ScoreMatrix] | None = None,
    n_iter: int = 4,
    normalize: bool = True,
) -> UnifyResult:
    """Fuse the three level matrices into the final retrieval scores.

    Each level's bias is computed from its reference matrix (test videos x
    training queries) and added to its test matrix before summing. With
    ``refs`` absent, biases come from the test matrices themselves, a
    documented fallback flagged in the result, since it presumes access to
    the full test query set. With ``normalize`` False, the plain sum
    (training-time behavior).
    """
    if len(levels) != 3:
        raise DataError(f"unify_levels expects 3 level matrices, got {len(levels)}")
    by_level = {}
    for mat in levels:
        mat.validate()
        if mat.level not in LEVELS:
            raise DataError(f"unify_levels: unexpected level '{mat.level}'")
        if mat.level in by_level:
            raise DataError(f"unify_levels: duplicate level '{mat.level}'")
        by_level[mat.level] = mat
    first = levels[0]
    for mat in levels[1:]:
        if mat.values.shape != first.values.shape:
            raise DataError("unify_levels: level matrices disagree on shape")
        if mat.row_ids != first.row_ids or mat.col_ids != first.col_ids:
            raise DataError("unify_levels: level matrices disagree on ids")
    ref_by_level: dict[str, ScoreMatrix] = {}
    if refs is not None:
        if len(refs) != 3:
            raise DataError(f"unify_levels expects 3 reference matrices, got {len(refs)}")
        for ref in refs:
            ref.validate()
            if ref.level not in by_level:
                raise DataError(f"unify_levels: reference for unknown level '{ref.level}'")
            if ref.row_ids != first.row_ids:
                raise DataError(
                    f"unify_levels: reference '{ref.level}' rows do not match test rows"
                )
            ref_by_level[ref.level] = ref

    total = np.zeros_like(first.values, dtype=np.float64)
    biases: dict[str, SkBias] = {}
    for name in LEVELS:
        mat = by_level[name]
        if normalize:
            source = ref_by_level.get(name, mat)
            bias = sinkhorn_bias(source.values, n_iter)
            biases[name] = bias
            total += apply_bias(mat.values, bias)
        else:
            total += np.asarray(mat.values, dtype=np.float64)
    fused = ScoreMatrix(
        values=total, row_ids=list(first.row_ids), col_ids=list(first.col_ids), level="r"
    ).validate()
    return UnifyResult(
        scores=fused,
        normalized=normalize,
        self_reference=normalize and refs is None,
        n_iter=n_iter if normalize else 0,
        level_biases=biases,
    )
