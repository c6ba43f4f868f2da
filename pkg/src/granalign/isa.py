"""Interactive similarity aggregation.

A similarity vector is weighted by softmax(linear(softmax(c))) before a
weighted sum, which keeps the result a convex combination of the input
entries while letting the linear layer model interaction between
positions. The bidirectional form aggregates a patch-word matrix along
each axis in both orders and sums the two scalar results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .diffmath import AffineParams
from .errors import DataError, NumericError
from .tape import Tensor, as_tensor


@dataclass
class IsaParams:
    """Square linear layer acting along one fixed-length similarity axis."""

    linear: AffineParams

    @classmethod
    def identity(cls, d: int) -> "IsaParams":
        return cls(AffineParams(np.eye(d, dtype=np.float32), np.zeros(d, dtype=np.float32)))


@dataclass
class LevelScores:
    """Scalar similarity per granularity level for one (video, query) pair."""

    s_vs: float
    s_fs: float
    s_pw: float

    @property
    def total(self) -> float:
        return self.s_vs + self.s_fs + self.s_pw


def _plain(out, *inputs):
    if any(isinstance(i, Tensor) for i in inputs):
        return out
    return out.data if isinstance(out, Tensor) else out


def _check_dim(params: IsaParams, d: int, what: str) -> None:
    w = params.linear.weight
    shape = w.data.shape if isinstance(w, Tensor) else w.shape
    if shape != (d, d):
        raise DataError(f"{what}: linear weight {shape} does not match axis length {d}")


def isa_aggregate(c, params: IsaParams, pad_mask=None):
    """softmax(linear(softmax(c))) . c, a masked convex combination of c."""
    ct = as_tensor(c)
    if ct.data.ndim != 1:
        raise DataError(f"isa_aggregate expects a vector, got shape {ct.data.shape}")
    _check_dim(params, ct.data.shape[0], "isa_aggregate")
    inner = tape.softmax(ct, pad_mask=pad_mask)
    lin = tape.add(tape.matmul(as_tensor(params.linear.weight), inner), as_tensor(params.linear.bias))
    outer = tape.softmax(lin, pad_mask=pad_mask)
    out = tape.dot(outer, ct)
    return _plain(out, c)


def isa_over_axis(c_matrix, params: IsaParams, axis: int, pad_mask=None):
    """Apply the aggregation independently to each slice along *axis*.

    The output has the length of the kept axis; ``pad_mask`` is a 1-D
    mask over the reduced axis applied to every slice.
    """
    ct = as_tensor(c_matrix)
    if ct.data.ndim != 2:
        raise DataError(f"isa_over_axis expects a matrix, got shape {ct.data.shape}")
    if axis not in (0, 1):
        raise DataError(f"isa_over_axis: axis must be 0 or 1, got {axis}")
    x = ct if axis == 0 else tape.transpose(ct)  # reduce rows of x
    d = x.data.shape[0]
    _check_dim(params, d, "isa_over_axis")
    mask2d = None if pad_mask is None else np.asarray(pad_mask, dtype=bool)[:, None]
    inner = tape.softmax(x, pad_mask=mask2d, axis=0)
    lin = tape.add(
        tape.matmul(as_tensor(params.linear.weight), inner),
        tape.reshape(as_tensor(params.linear.bias), (d, 1)),
    )
    outer = tape.softmax(lin, pad_mask=mask2d, axis=0)
    out = tape.sum_axis(tape.mul(outer, x), axis=0)
    return _plain(out, c_matrix)


def bi_isa(c_pw, params_p: IsaParams, params_w: IsaParams, word_pad_mask=None):
    """Sum of patch-then-word and word-then-patch aggregation of C_PW.

    ``params_p`` acts along the patch axis (rows), ``params_w`` along the
    word axis (columns); padded word columns are excluded throughout.
    """
    ct = as_tensor(c_pw)
    # patch-level reduction -> word-level vector, then word-level aggregation
    word_vec = isa_over_axis(ct, params_p, axis=0)
    s_ptw = isa_aggregate(word_vec, params_w, pad_mask=word_pad_mask)
    # word-level reduction -> patch-level vector, then patch-level aggregation
    patch_vec = isa_over_axis(ct, params_w, axis=1, pad_mask=word_pad_mask)
    s_wtp = isa_aggregate(patch_vec, params_p)
    out = tape.add(s_ptw, s_wtp)
    return _plain(out, c_pw)


def aggregate_baseline(c, mode: str, pad_mask=None):
    """Reference aggregators: unmasked mean, or softmax(c) . c."""
    ct = as_tensor(c)
    if ct.data.ndim != 1:
        raise DataError(f"aggregate_baseline expects a vector, got shape {ct.data.shape}")
    if mode == "mean":
        if pad_mask is None:
            out = tape.mean_all(ct)
        else:
            keep = ~np.asarray(pad_mask, dtype=bool)
            if not keep.any():
                raise NumericError("aggregate_baseline: all entries masked")
            out = tape.scale(tape.dot(ct, tape.constant(keep.astype(float))), 1.0 / keep.sum())
    elif mode == "softmax":
        out = tape.dot(tape.softmax(ct, pad_mask=pad_mask), ct)
    else:
        raise DataError(f"unknown aggregation mode '{mode}'")
    return _plain(out, c)
