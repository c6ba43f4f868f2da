"""Saliency-based patch selection with a perturbed-maximum training path.

Inference selects the hard top-K patches per frame. Training replaces the
hard selection with a Monte-Carlo indicator built from Gaussian
perturbations of the saliency scores. The perturbed sample points are
frozen per step and reweighted by the Gaussian likelihood ratio against
the sampling anchor, which makes the indicator an honestly differentiable
function of the scores (finite-difference checkable) while its value and
gradient at the anchor coincide with the plain perturbed-maximum
estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .diffmath import AffineParams
from .errors import DataError, NumericError
from .tape import Tensor, as_tensor


@dataclass
class MlpParams:
    """Two affine layers with the smooth activation between them."""

    first: AffineParams
    second: AffineParams


@dataclass
class SelectorParams:
    """g_a fuses patch+frame context (2C->C->C); g_b scores saliency (2C->C->1)."""

    g_a: MlpParams
    g_b: MlpParams

    @classmethod
    def init(cls, c: int, rng: np.random.Generator) -> "SelectorParams":
        return cls(
            g_a=MlpParams(AffineParams.random(c, 2 * c, rng), AffineParams.random(c, c, rng)),
            g_b=MlpParams(AffineParams.random(c, 2 * c, rng), AffineParams.random(1, c, rng)),
        )


@dataclass
class Selection:
    """Per-frame top-K choice; soft indicators present only for training."""

    indices: np.ndarray | None  # (N, K) int, each row sorted by descending saliency
    soft_indicators: list | None = None  # per frame: (M, K), columns sum to 1


def _mlp(x, params: MlpParams):
    h = tape.gelu(tape.affine_rows(x, as_tensor(params.first.weight), as_tensor(params.first.bias)))
    return tape.affine_rows(h, as_tensor(params.second.weight), as_tensor(params.second.bias))


def saliency_scores(patches_n, frame_n, video, params: SelectorParams):
    """Per-patch saliency from patch+frame context fused with the video vector."""
    p = as_tensor(patches_n)
    f = as_tensor(frame_n)
    v = as_tensor(video)
    if p.data.ndim != 2:
        raise DataError(f"saliency_scores: patches must be 2-D, got {p.data.shape}")
    m, c = p.data.shape
    if f.data.shape != (c,) or v.data.shape != (c,):
        raise DataError(
            f"saliency_scores: frame {f.data.shape} / video {v.data.shape} "
            f"inconsistent with patch dim {c}"
        )
    fused = _mlp(tape.concat([p, tape.repeat_row(f, m)], axis=1), params.g_a)
    scores = _mlp(tape.concat([fused, tape.repeat_row(v, m)], axis=1), params.g_b)
    out = tape.reshape(scores, (m,))
    if any(isinstance(x, Tensor) for x in (patches_n, frame_n, video)):
        return out
    return out.data


def _topk_desc(values: np.ndarray, k: int) -> np.ndarray:
    # stable argsort of the negated values: descending, ties toward lower index
    return np.argsort(-values, kind="stable")[..., :k]


def select_topk(u, k: int) -> np.ndarray:
    """Indices of the K largest entries, descending, ties toward lower index."""
    values = np.asarray(u, dtype=np.float64)
    if values.ndim != 1:
        raise DataError(f"select_topk expects a vector, got shape {values.shape}")
    if not 1 <= k <= values.shape[0]:
        raise DataError(f"select_topk: K={k} outside [1, {values.shape[0]}]")
    return _topk_desc(values, k)


def perturbed_topk_indicator(u, k: int, sigma: float, n_samples: int, seed) -> np.ndarray:
    """Monte-Carlo (M, K) indicator: column j averages the one-hot of the
    j-th ranked entry of u + sigma * gaussian over n_samples draws."""
    values = np.asarray(u, dtype=np.float64)
    if values.ndim != 1:
        raise DataError(f"perturbed_topk_indicator expects a vector, got {values.shape}")
    m = values.shape[0]
    if not 1 <= k <= m:
        raise DataError(f"perturbed_topk_indicator: K={k} outside [1, {m}]")
    if sigma <= 0:
        raise DataError(f"perturbed_topk_indicator: sigma must be > 0, got {sigma}")
    if n_samples < 1:
        raise DataError(f"perturbed_topk_indicator: n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    z = values[None, :] + sigma * rng.normal(size=(n_samples, m))
    idx = _topk_desc(z, k)
    ind = np.zeros((m, k))
    for col in range(k):
        np.add.at(ind[:, col], idx[:, col], 1.0)
    return ind / n_samples


@dataclass
class FrozenSelectionNoise:
    """Perturbed sample points fixed for one forward/backward pair."""

    anchor: np.ndarray  # (M,) saliency the samples were drawn around
    z: np.ndarray  # (n_samples, M) perturbed score points
    idx: np.ndarray  # (n_samples, K) per-sample ranked top-K indices
    sigma: float

    @classmethod
    def sample(
        cls, anchor, k: int, sigma: float, n_samples: int, rng: np.random.Generator
    ) -> "FrozenSelectionNoise":
        anchor = np.asarray(anchor, dtype=np.float64)
        if sigma <= 0 or n_samples < 1:
            raise DataError("frozen selection noise needs sigma > 0 and n_samples >= 1")
        z = anchor[None, :] + sigma * rng.normal(size=(n_samples, anchor.shape[0]))
        return cls(anchor=anchor, z=z, idx=_topk_desc(z, k), sigma=sigma)


def soft_indicator(u, frozen: FrozenSelectionNoise):
    """Differentiable (M, K) indicator from frozen perturbed samples.

    Each frozen sample's hard one-hot is weighted by the Gaussian
    likelihood ratio between the current scores and the anchor; at the
    anchor the weights are all 1 and the value equals
    :func:`perturbed_topk_indicator` on the same samples.
    """
    ut = as_tensor(u)
    m = frozen.anchor.shape[0]
    if ut.data.shape != (m,):
        raise DataError(f"soft_indicator: scores shape {ut.data.shape} != anchor ({m},)")
    n, k = frozen.idx.shape
    var2 = 2.0 * frozen.sigma**2
    logw = (((frozen.z - frozen.anchor) ** 2).sum(axis=1) - ((frozen.z - ut.data) ** 2).sum(axis=1)) / var2
    w = np.exp(logw)
    if not np.all(np.isfinite(w)):
        raise NumericError("soft_indicator: likelihood weights overflowed")
    ind = np.zeros((m, k))
    for col in range(k):
        np.add.at(ind[:, col], frozen.idx[:, col], w)
    ind /= n

    def vjp(g):
        coef = g[frozen.idx, np.arange(k)[None, :]].sum(axis=1)  # (n,)
        gu = ((coef * w)[:, None] * (frozen.z - ut.data)).sum(axis=0) / (n * frozen.sigma**2)
        return (gu,)

    out = Tensor(ind, _parents=(ut,), _vjp=vjp)
    return out if isinstance(u, Tensor) else out.data


def gather_selected(patches, selection: Selection):
    """Concatenate selected patch rows across frames (frame-major, L_v = N*K).

    With soft indicators present, each output row is the
    indicator-weighted combination of the frame's patches, keeping the
    path differentiable.
    """
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    if arr.ndim != 3:
        raise DataError(f"gather_selected: patches must be 3-D, got {arr.shape}")
    n, m, _ = arr.shape
    parts = []
    tensorish = isinstance(patches, Tensor)
    for frame in range(n):
        pn = as_tensor(arr[frame])
        if selection.soft_indicators is not None:
            ind = selection.soft_indicators[frame]
            tensorish = tensorish or isinstance(ind, Tensor)
            parts.append(tape.matmul(tape.transpose(as_tensor(ind)), pn))
        else:
            idx = np.asarray(selection.indices[frame], dtype=np.intp)
            if idx.size and (idx.min() < 0 or idx.max() >= m):
                raise DataError(f"gather_selected: index out of range for frame {frame}")
            parts.append(tape.take_rows(pn, idx))
    out = tape.concat(parts, axis=0)
    return out if tensorish else out.data
