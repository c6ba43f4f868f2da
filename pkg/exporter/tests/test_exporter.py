import json
from pathlib import Path

import numpy as np
import pytest

from feature_exporter import ExportJob, HashEncoder, export, sample_indices
from feature_exporter.exporter import main

# the scoring engine is the validation oracle for everything we emit
from granalign import load_dataset, read_container

cv2 = pytest.importorskip("cv2")


def _clip_encoder_or_none():
    try:
        from feature_exporter import ClipEncoder

        return ClipEncoder()
    except Exception:
        return None


def _write_video(path: Path, n_frames: int = 20, size=(64, 48)) -> None:
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), 5.0, size)
    assert writer.isOpened()
    rng = np.random.default_rng(7)
    for i in range(n_frames):
        frame = np.full((size[1], size[0], 3), i * 9 % 255, np.uint8)
        frame[8:24, 8:24] = rng.integers(0, 255, size=3, dtype=np.uint8)
        writer.write(frame)
    writer.release()


@pytest.fixture
def video_dir(tmp_path):
    videos = tmp_path / "videos"
    videos.mkdir()
    _write_video(videos / "clip_a.avi")
    _write_video(videos / "clip_b.avi", n_frames=7)
    captions = {"clip_a": "a red square drifts across a gray field", "clip_b": "flat gray frames"}
    captions_file = tmp_path / "captions.json"
    captions_file.write_text(json.dumps(captions))
    return videos, captions_file


def test_sample_indices_uniform_and_short_clips():
    assert sample_indices(20, 4).tolist() == [0, 6, 13, 19]
    assert sample_indices(2, 4).tolist() == [0, 0, 1, 1]
    with pytest.raises(ValueError):
        sample_indices(0, 4)


def test_export_passes_primary_reader_validation(video_dir, tmp_path):
    videos, captions_file = video_dir
    out = tmp_path / "out"
    job = ExportJob(
        videos=sorted(videos.iterdir()),
        captions=json.loads(captions_file.read_text()),
        frames_per_video=12,
        out_dir=out,
    )
    summary = export(job, HashEncoder())
    assert summary.exported == 2 and summary.skipped == 0

    # every emitted file is accepted by the scoring engine's loader
    bundles, queries, manifest = load_dataset(out / "manifest.json")
    assert len(bundles) == 2 and len(queries) == 2
    for bundle in bundles:
        assert bundle.frames.shape == (12, 512)
        assert bundle.patches.shape == (12, 49, 512)
    for query in queries:
        assert query.words.shape == (32, 512)
        assert query.sentence.shape == (512,)
        assert 1 <= query.valid_len <= 32


def test_export_is_deterministic(video_dir, tmp_path):
    videos, captions_file = video_dir
    captions = json.loads(captions_file.read_text())
    job_args = dict(videos=sorted(videos.iterdir()), captions=captions, frames_per_video=12)
    export(ExportJob(**job_args, out_dir=tmp_path / "run1"), HashEncoder())
    export(ExportJob(**job_args, out_dir=tmp_path / "run2"), HashEncoder())
    for file in sorted((tmp_path / "run1").iterdir()):
        twin = tmp_path / "run2" / file.name
        assert file.read_bytes() == twin.read_bytes(), file.name


def test_decode_failure_skips_with_warning(video_dir, tmp_path):
    videos, captions_file = video_dir
    broken = videos / "clip_c.avi"
    broken.write_bytes(b"not a video")
    captions = json.loads(captions_file.read_text())
    captions["clip_c"] = "a caption for a broken file"
    out = tmp_path / "out"
    job = ExportJob(videos=sorted(videos.iterdir()), captions=captions, frames_per_video=4, out_dir=out)
    summary = export(job, HashEncoder())
    assert summary.exported == 2
    assert summary.skipped == 1
    assert any("clip_c" in w for w in summary.warnings)
    # manifest still validates
    load_dataset(out / "manifest.json")


def test_frame_directory_input(tmp_path):
    frame_dir = tmp_path / "videos" / "framedir_clip"
    frame_dir.mkdir(parents=True)
    for i in range(6):
        img = np.full((32, 32, 3), i * 40, np.uint8)
        cv2.imwrite(str(frame_dir / f"{i:03d}.png"), img)
    captions_file = tmp_path / "captions.json"
    captions_file.write_text(json.dumps({"framedir_clip": "synthetic gradient frames"}))
    out = tmp_path / "out"
    job = ExportJob(videos=[frame_dir], captions=json.loads(captions_file.read_text()),
                    frames_per_video=3, out_dir=out)
    summary = export(job, HashEncoder(dim=64, patches_per_frame=9, max_words=8))
    assert summary.exported == 1
    tensors = read_container(out / "vid_framedir_clip.ucfa")
    assert tensors["frames"].shape == (3, 64)
    assert tensors["patches"].shape == (3, 9, 64)


def test_cli_end_to_end(video_dir, tmp_path, capsys):
    videos, captions_file = video_dir
    out = tmp_path / "cli_out"
    code = main([
        "--videos", str(videos), "--captions", str(captions_file),
        "--frames", "12", "--out", str(out), "--model", "hash",
    ])
    captured = capsys.readouterr()
    assert code == 0
    report = json.loads(captured.out)
    assert report["exported"] == 2
    bundles, _, _ = load_dataset(out / "manifest.json")
    assert bundles[0].frames.shape == (12, 512)


def test_cli_missing_captions_file(tmp_path, capsys):
    code = main([
        "--videos", str(tmp_path), "--captions", str(tmp_path / "none.json"),
        "--frames", "4", "--out", str(tmp_path / "o"),
    ])
    assert code == 2


@pytest.mark.skipif(_clip_encoder_or_none() is None, reason="pretrained CLIP weights not available locally")
def test_clip_encoder_dimensions(video_dir, tmp_path):
    videos, captions_file = video_dir
    out = tmp_path / "clip_out"
    job = ExportJob(
        videos=sorted(videos.iterdir()),
        captions=json.loads(captions_file.read_text()),
        frames_per_video=12,
        out_dir=out,
    )
    summary = export(job, _clip_encoder_or_none())
    assert summary.exported == 2
    bundles, queries, _ = load_dataset(out / "manifest.json")
    assert bundles[0].frames.shape == (12, 512)
    assert queries[0].words.shape == (32, 512)
