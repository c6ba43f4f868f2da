import numpy as np
import pytest

from granalign import (
    AttentionParams,
    DataError,
    NumericError,
    attention_block,
    frame_sentence_vector,
    patch_word_matrix,
    temporal_encode,
    video_sentence_score,
)


def test_temporal_encode_identical_rows():
    row = np.array([0.2, -1.0, 3.0])
    frames = np.tile(row, (4, 1))
    out = temporal_encode(frames, AttentionParams.zeros(4, 3))
    assert out == pytest.approx(row)


def test_temporal_encode_zero_init_is_mean():
    frames = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = temporal_encode(frames, AttentionParams.zeros(2, 2))
    assert out == pytest.approx([0.5, 0.5])


def test_temporal_encode_composes_attention_and_mean():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(4, 8))
    params = AttentionParams.zeros(4, 8)
    for arr in vars(params).values():
        arr[...] = rng.normal(size=arr.shape) * 0.3
    expected = attention_block(frames, params).mean(axis=0)
    assert temporal_encode(frames, params) == pytest.approx(expected, abs=1e-5)


def test_video_sentence_score():
    v = np.array([1.0, 2.0, 3.0])
    assert video_sentence_score(v, v) == pytest.approx(1.0)
    assert video_sentence_score(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0)
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=5), rng.normal(size=5)
    expected = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert video_sentence_score(a, b) == pytest.approx(expected, abs=1e-6)
    with pytest.raises(NumericError):
        video_sentence_score(np.zeros(3), v)


def test_frame_sentence_vector():
    s = np.array([1.0, 1.0])
    frames = np.tile(s, (3, 1))
    assert frame_sentence_vector(frames, s) == pytest.approx([1.0, 1.0, 1.0])
    orth = np.tile(np.array([1.0, -1.0]), (3, 1))
    assert frame_sentence_vector(orth, s) == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4))
    v = rng.normal(size=4)
    expected = [float(r @ v / (np.linalg.norm(r) * np.linalg.norm(v))) for r in x]
    assert frame_sentence_vector(x, v) == pytest.approx(expected, abs=1e-6)


def test_frame_sentence_zero_norm_row_names_row():
    frames = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericError, match="frame row 1"):
        frame_sentence_vector(frames, np.array([1.0, 0.0]))


def test_frame_sentence_permutation_equivariance():
    rng = np.random.default_rng(3)
    frames = rng.normal(size=(5, 4))
    s = rng.normal(size=4)
    base = frame_sentence_vector(frames, s)
    perm = rng.permutation(5)
    assert frame_sentence_vector(frames[perm], s) == pytest.approx(base[perm])


def test_patch_word_single_pair():
    p = np.array([[0.0, 2.0]])
    mat, mask = patch_word_matrix(p, p, valid_len=1)
    assert mat == pytest.approx(np.ones((1, 1)))
    assert mask.tolist() == [False]


def test_patch_word_orthogonal():
    patches = np.array([[1.0, 0.0], [2.0, 0.0]])
    words = np.array([[0.0, 1.0], [0.0, -3.0]])
    mat, _ = patch_word_matrix(patches, words, valid_len=2)
    assert mat == pytest.approx(np.zeros((2, 2)), abs=1e-12)


def test_patch_word_matches_all_pairs_oracle():
    rng = np.random.default_rng(4)
    patches = rng.normal(size=(4, 5))
    words = rng.normal(size=(3, 5))
    mat, mask = patch_word_matrix(patches, words, valid_len=3)
    for i in range(4):
        for j in range(3):
            expected = patches[i] @ words[j] / (np.linalg.norm(patches[i]) * np.linalg.norm(words[j]))
            assert mat[i, j] == pytest.approx(expected, abs=1e-6)
    assert not mask.any()


def test_patch_word_padding_masked_and_zero_sentinel():
    rng = np.random.default_rng(5)
    patches = rng.normal(size=(2, 4))
    words = np.vstack([rng.normal(size=(2, 4)), np.zeros((2, 4))])  # zero-norm padding rows
    mat, mask = patch_word_matrix(patches, words, valid_len=2)
    assert mask.tolist() == [False, False, True, True]
    assert np.all(mat[:, 2:] == 0.0)
    assert np.all(np.abs(mat[:, :2]) <= 1 + 1e-5)


def test_patch_word_zero_norm_in_valid_region_fails():
    patches = np.array([[1.0, 0.0]])
    words = np.array([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(NumericError, match="word row 0"):
        patch_word_matrix(patches, words, valid_len=2)


def test_patch_word_transpose_symmetry():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(5, 4))
    ab, _ = patch_word_matrix(a, b, valid_len=5)
    ba, _ = patch_word_matrix(b, a, valid_len=3)
    assert ab.T == pytest.approx(ba, abs=1e-12)


def test_similarities_bounded():
    rng = np.random.default_rng(7)
    for _ in range(20):
        patches = rng.normal(size=(4, 6)) * rng.uniform(0.1, 10)
        words = rng.normal(size=(3, 6)) * rng.uniform(0.1, 10)
        mat, _ = patch_word_matrix(patches, words, valid_len=3)
        assert np.all(mat >= -1 - 1e-5) and np.all(mat <= 1 + 1e-5)


def test_patch_word_bad_valid_len():
    with pytest.raises(DataError):
        patch_word_matrix(np.ones((2, 3)), np.ones((2, 3)), valid_len=0)
