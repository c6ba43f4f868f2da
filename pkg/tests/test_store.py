import numpy as np
import pytest

from granalign import (
    DataError,
    FeatureBundle,
    Manifest,
    ManifestEntry,
    QueryFeatures,
    gen_synthetic,
    load_bundle,
    load_dataset,
    load_query,
    save_bundle,
    save_query,
    write_dataset,
)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_zero_noise_frames_align_with_sentence():
    bundles, queries, _ = gen_synthetic(2, 8, 2, 4, 3, 0.0, 7)
    for bundle, query in zip(bundles, queries):
        for row in bundle.frames.astype(np.float64):
            assert _cos(row, query.sentence.astype(np.float64)) == pytest.approx(1.0, abs=1e-6)


def test_gen_synthetic_deterministic():
    a = gen_synthetic(3, 8, 2, 4, 3, 0.2, 7)
    b = gen_synthetic(3, 8, 2, 4, 3, 0.2, 7)
    for x, y in zip(a[0], b[0]):
        assert x.frames.tobytes() == y.frames.tobytes()
        assert x.patches.tobytes() == y.patches.tobytes()
    for x, y in zip(a[1], b[1]):
        assert x.words.tobytes() == y.words.tobytes()
        assert x.sentence.tobytes() == y.sentence.tobytes()
        assert x.valid_len == y.valid_len


def test_diagonal_dominates_raw_cosines():
    bundles, queries, _ = gen_synthetic(16, 32, 4, 9, 8, 0.1, 1)
    # raw score: cosine of mean frame vector against each sentence
    scores = np.zeros((16, 16))
    for i, bundle in enumerate(bundles):
        v = bundle.frames.astype(np.float64).mean(axis=0)
        for j, query in enumerate(queries):
            scores[i, j] = _cos(v, query.sentence.astype(np.float64))
    assert np.array_equal(np.argmax(scores, axis=1), np.arange(16))


def test_bundle_query_round_trip(tmp_path):
    bundles, queries, _ = gen_synthetic(1, 8, 2, 3, 4, 0.3, 5)
    save_bundle(bundles[0], tmp_path / "b.ucfa")
    loaded = load_bundle(tmp_path / "b.ucfa", bundles[0].id)
    assert loaded.frames.tobytes() == bundles[0].frames.tobytes()
    assert loaded.patches.tobytes() == bundles[0].patches.tobytes()
    save_query(queries[0], tmp_path / "q.ucfa")
    q = load_query(tmp_path / "q.ucfa", queries[0].id)
    assert q.valid_len == queries[0].valid_len
    assert q.words.tobytes() == queries[0].words.tobytes()


def test_dataset_round_trip(tmp_path):
    bundles, queries, manifest = gen_synthetic(3, 8, 2, 3, 4, 0.2, 5)
    manifest_path = write_dataset(bundles, queries, manifest, tmp_path)
    b2, q2, m2 = load_dataset(manifest_path)
    assert [b.id for b in b2] == [b.id for b in bundles]
    assert [q.id for q in q2] == [q.id for q in queries]
    assert b2[1].frames.tobytes() == bundles[1].frames.tobytes()


def test_bundle_validation_rejects_bad_shapes():
    with pytest.raises(DataError, match="inconsistent"):
        FeatureBundle("v", np.ones((2, 4), np.float32), np.ones((3, 2, 4), np.float32)).validate()
    with pytest.raises(DataError, match="non-finite"):
        FeatureBundle(
            "v", np.full((2, 4), np.inf, np.float32), np.ones((2, 2, 4), np.float32)
        ).validate()


def test_query_validation():
    with pytest.raises(DataError, match="valid_len"):
        QueryFeatures("q", np.ones((3, 4), np.float32), np.ones(4, np.float32), 0).validate()
    q = QueryFeatures("q", np.ones((3, 4), np.float32), np.ones(4, np.float32), 2).validate()
    assert q.pad_mask.tolist() == [False, False, True]


def test_manifest_validation():
    entries = [
        ManifestEntry("v0", "video", "v0.ucfa", ["q0"]),
        ManifestEntry("q0", "query", "q0.ucfa", ["v0"]),
    ]
    Manifest(entries).validate()
    with pytest.raises(DataError, match="does not resolve"):
        Manifest(entries + [ManifestEntry("q1", "query", "q1.ucfa", ["nope"])]).validate()
    with pytest.raises(DataError, match="duplicate"):
        Manifest(entries + [ManifestEntry("v0", "video", "x.ucfa", [])]).validate()
    with pytest.raises(DataError, match="at least one"):
        Manifest([ManifestEntry("v0", "video", "v0.ucfa", [])]).validate()


def test_gen_synthetic_precondition_errors():
    with pytest.raises(DataError):
        gen_synthetic(0, 8, 2, 4, 3, 0.1, 7)
    with pytest.raises(DataError):
        gen_synthetic(2, 8, 2, 4, 3, -0.5, 7)
