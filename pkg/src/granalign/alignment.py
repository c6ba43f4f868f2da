"""Cross-modal similarity at three granularities for one (video, query) pair.

Video-sentence: cosine of the temporally encoded video vector against the
sentence vector. Frame-sentence: per-frame cosines (length N). Patch-word:
all-pairs cosines between selected patches and valid words, padded with a
zero sentinel and a mask for padded word columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .diffmath import AttentionParams, attention_block
from .errors import DataError
from .tape import Tensor, as_tensor


@dataclass
class LevelSimilarities:
    """Raw similarity structures of one pair before aggregation."""

    s_vs: float
    c_fs: np.ndarray  # (N,)
    c_pw: np.ndarray  # (L_v, L_t), zero sentinel in masked columns
    word_mask: np.ndarray  # (L_t,) bool, True = padding column


def _plain(out, *inputs):
    if any(isinstance(i, Tensor) for i in inputs):
        return out
    return out.data if isinstance(out, Tensor) else out


def temporal_encode(frames, params: AttentionParams):
    """Video vector: mean over rows of the attention block output.

    With zero-initialized attention this is exact mean pooling.
    """
    encoded = attention_block(as_tensor(frames), params)
    out = tape.mean_axis(encoded, axis=0)
    return _plain(out, frames)


def video_sentence_score(v, s):
    """Cosine between the video vector and the sentence vector."""
    return _plain(tape.cosine(as_tensor(v), as_tensor(s)), v, s)


def frame_sentence_vector(frames, s):
    """Entry n is the cosine of frame row n against the sentence vector."""
    return _plain(tape.cosine_rows(as_tensor(frames), as_tensor(s), what="frame row"), frames, s)


def patch_word_matrix(selected_patches, words, valid_len: int):
    """All-pairs cosines between selected patches and the valid words.

    Returns ``(matrix, mask)`` where the matrix is (L_v, L_t) with zero
    sentinels in the padded columns and mask is True at those columns.
    Padded word rows are never dotted, so zero-norm padding is legal.
    """
    p = as_tensor(selected_patches)
    w = as_tensor(words)
    if p.data.ndim != 2 or w.data.ndim != 2 or p.data.shape[1] != w.data.shape[1]:
        raise DataError(
            f"patch_word_matrix: incompatible shapes {p.data.shape}, {w.data.shape}"
        )
    l_t = w.data.shape[0]
    if not 1 <= valid_len <= l_t:
        raise DataError(f"patch_word_matrix: valid_len {valid_len} outside [1, {l_t}]")
    valid_words = tape.take_rows(w, np.arange(valid_len))
    sim = tape.matmul(
        tape.l2norm_rows(p, what="patch row"),
        tape.transpose(tape.l2norm_rows(valid_words, what="word row")),
    )
    out = tape.pad_cols(sim, l_t)
    mask = np.arange(l_t) >= valid_len
    return _plain(out, selected_patches, words), mask
