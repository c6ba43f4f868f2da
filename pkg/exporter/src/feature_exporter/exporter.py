"""One-file bridge from raw videos/captions to UCFA v1 feature containers.

Uniformly samples N frames per video, runs an image-text encoder, and
writes per-item containers plus a manifest in the layout the scoring
engine reads: videos get ``frames`` (N x C) and ``patches`` (N x M x C)
tensors, queries get ``words`` (L_t x C), ``sentence`` (C) and a 0/1
prefix ``mask``. The container writer below mirrors the published UCFA v1
byte layout; the scoring engine's reader is the validation oracle.

The encoder is injectable. ``ClipEncoder`` wraps a pretrained CLIP
checkpoint (weights must be available locally); ``HashEncoder`` is a
deterministic drop-in used when no pretrained weights are reachable, for
exercising the export mechanics.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")


# -- UCFA v1 writer (little-endian; see the scoring engine for the reader) --


def write_ucfa(tensors: dict[str, np.ndarray], path: Path) -> None:
    blob = bytearray(b"UCFA")
    blob += struct.pack("<BBBB", 1, 1, 0, 0)
    blob += struct.pack("<I", len(tensors))
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        if arr.ndim > 3:
            raise ValueError(f"tensor '{name}' has rank {arr.ndim} > 3")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor '{name}' contains non-finite values")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.tobytes()
    path.write_bytes(bytes(blob))


# -- frame loading -------------------------------------------------------


def sample_indices(total: int, n: int) -> np.ndarray:
    """Uniform temporal sampling; repeats frames when the clip is short."""
    if total < 1:
        raise ValueError("video has no frames")
    return np.round(np.linspace(0, total - 1, n)).astype(int)


def load_frames(video_path: Path, n: int) -> np.ndarray:
    """Decode a video file (or a directory of frame images) into n RGB frames."""
    if video_path.is_dir():
        files = sorted(
            p for p in video_path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise ValueError(f"{video_path}: no frame images found")
        import cv2

        picked = [files[i] for i in sample_indices(len(files), n)]
        frames = []
        for file in picked:
            img = cv2.imread(str(file))
            if img is None:
                raise ValueError(f"{file}: decode failed")
            frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
        return np.stack(frames)
    import cv2

    cap = cv2.VideoCapture(str(video_path))
    if not cap.isOpened():
        raise ValueError(f"{video_path}: cannot open video")
    total = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    if total < 1:
        cap.release()
        raise ValueError(f"{video_path}: no frames")
    wanted = sample_indices(total, n)
    frames = []
    for index in wanted:
        cap.set(cv2.CAP_PROP_POS_FRAMES, int(index))
        ok, frame = cap.read()
        if not ok:
            cap.release()
            raise ValueError(f"{video_path}: failed to read frame {index}")
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    cap.release()
    return np.stack(frames)


# -- encoders ------------------------------------------------------------


class ClipEncoder:
    """Pretrained CLIP wrapper: per-frame [CLS] plus final-layer patch
    tokens (pre-pooling), projected into the joint C-dimensional space.

    Requires the model weights to be available locally.
    """

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", max_words: int = 32):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self.torch = torch
        self.model = CLIPModel.from_pretrained(model_name)
        self.model.eval()
        self.processor = CLIPProcessor.from_pretrained(model_name)
        self.max_words = max_words
        self.dim = self.model.config.projection_dim

    def encode_frames(self, frames: np.ndarray):
        torch = self.torch
        inputs = self.processor(images=list(frames), return_tensors="pt")
        with torch.no_grad():
            vision = self.model.vision_model(pixel_values=inputs["pixel_values"])
            hidden = vision.last_hidden_state  # (N, 1+M, hidden)
            normed = self.model.vision_model.post_layernorm(hidden)
            projected = self.model.visual_projection(normed)  # (N, 1+M, C)
        cls = projected[:, 0, :].numpy()
        patches = projected[:, 1:, :].numpy()
        return cls.astype(np.float32), patches.astype(np.float32)

    def encode_caption(self, caption: str):
        torch = self.torch
        inputs = self.processor(
            text=[caption], return_tensors="pt", padding="max_length",
            truncation=True, max_length=self.max_words,
        )
        with torch.no_grad():
            text = self.model.text_model(
                input_ids=inputs["input_ids"], attention_mask=inputs["attention_mask"]
            )
            words = self.model.text_projection(text.last_hidden_state)[0].numpy()
            sentence = self.model.get_text_features(
                input_ids=inputs["input_ids"], attention_mask=inputs["attention_mask"]
            )[0].numpy()
        valid_len = int(inputs["attention_mask"][0].sum())
        return words.astype(np.float32), sentence.astype(np.float32), valid_len


class HashEncoder:
    """Deterministic stand-in encoder with CLIP-like output shapes.

    Frame and token embeddings are unit-norm vectors seeded from content
    hashes, so exports are reproducible byte-for-byte without any
    pretrained weights. Useful for tests and plumbing checks only.
    """

    def __init__(self, dim: int = 512, patches_per_frame: int = 49, max_words: int = 32):
        self.dim = dim
        self.patches_per_frame = patches_per_frame
        self.max_words = max_words

    def _vec(self, *seed_parts) -> np.ndarray:
        import hashlib

        digest = hashlib.blake2b(repr(seed_parts).encode(), digest_size=8).digest()
        seed = int.from_bytes(digest, "little")
        v = np.random.default_rng(seed).normal(size=self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def encode_frames(self, frames: np.ndarray):
        cls = np.stack([self._vec("frame", arr.tobytes()) for arr in frames])
        grid = int(np.sqrt(self.patches_per_frame))
        patches = []
        for arr in frames:
            rows = []
            for patch_index in range(self.patches_per_frame):
                r = (patch_index // grid) * (arr.shape[0] // max(1, grid))
                c = (patch_index % grid) * (arr.shape[1] // max(1, grid))
                rows.append(self._vec("patch", patch_index, arr[r, c].tobytes()))
            patches.append(np.stack(rows))
        return cls, np.stack(patches)

    def encode_caption(self, caption: str):
        tokens = caption.split()[: self.max_words - 1] or ["<empty>"]
        words = np.zeros((self.max_words, self.dim), dtype=np.float32)
        for i, token in enumerate(tokens):
            words[i] = self._vec("word", token)
        valid_len = len(tokens) + 1  # trailing sentence-level slot
        words[valid_len - 1] = self._vec("sentence", caption)
        return words, self._vec("sentence", caption), valid_len


# -- export job ----------------------------------------------------------


@dataclass
class ExportJob:
    videos: list[Path]
    captions: dict[str, str]  # video stem -> caption
    frames_per_video: int = 12
    out_dir: Path = Path("export")


@dataclass
class ExportSummary:
    exported: int = 0
    skipped: int = 0
    warnings: list[str] = field(default_factory=list)
    manifest_path: str = ""


def export(job: ExportJob, encoder) -> ExportSummary:
    """Run the encoder over every video/caption pair and write containers.

    Videos that fail to decode are skipped with a warning and counted in
    the summary. Writes one container per video, one per query, and a
    manifest.json linking pairs.
    """
    if job.frames_per_video < 1:
        raise ValueError("frames_per_video must be >= 1")
    job.out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    summary = ExportSummary()
    for video in job.videos:
        stem = video.stem
        caption = job.captions.get(stem)
        if caption is None:
            summary.skipped += 1
            summary.warnings.append(f"{video}: no caption, skipped")
            continue
        try:
            frames = load_frames(video, job.frames_per_video)
        except ValueError as exc:
            summary.skipped += 1
            summary.warnings.append(str(exc))
            continue
        cls, patches = encoder.encode_frames(frames)
        words, sentence, valid_len = encoder.encode_caption(caption)
        mask = (np.arange(words.shape[0]) < valid_len).astype(np.float32)
        vid_id, query_id = f"vid_{stem}", f"qry_{stem}"
        write_ucfa({"frames": cls, "patches": patches}, job.out_dir / f"{vid_id}.ucfa")
        write_ucfa(
            {"words": words, "sentence": sentence, "mask": mask},
            job.out_dir / f"{query_id}.ucfa",
        )
        entries.append(
            {"id": vid_id, "kind": "video", "path": f"{vid_id}.ucfa", "gt_partner_ids": [query_id]}
        )
        entries.append(
            {"id": query_id, "kind": "query", "path": f"{query_id}.ucfa", "gt_partner_ids": [vid_id]}
        )
        summary.exported += 1
    manifest_path = job.out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=2), encoding="utf-8")
    summary.manifest_path = str(manifest_path)
    return summary


def _collect_videos(videos_dir: Path) -> list[Path]:
    items = [p for p in sorted(videos_dir.iterdir()) if p.is_dir() or p.suffix.lower() in (".avi", ".mp4", ".mkv", ".mov", ".webm")]
    if not items:
        raise ValueError(f"{videos_dir}: no videos found")
    return items


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="exporter",
        description="Extract video/text features into UCFA v1 containers.",
    )
    parser.add_argument("--videos", required=True, help="directory of video files (or frame dirs)")
    parser.add_argument("--captions", required=True, help="JSON file mapping video stem -> caption")
    parser.add_argument("--frames", type=int, default=12, help="frames sampled per video")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--model", default="openai/clip-vit-base-patch32",
        help="pretrained encoder name or local path; 'hash' selects the weight-free stand-in",
    )
    parser.add_argument("--max-words", type=int, default=32)
    args = parser.parse_args(argv)

    try:
        captions = json.loads(Path(args.captions).read_text(encoding="utf-8"))
        videos = _collect_videos(Path(args.videos))
        if args.model == "hash":
            encoder = HashEncoder(max_words=args.max_words)
        else:
            encoder = ClipEncoder(args.model, max_words=args.max_words)
        job = ExportJob(
            videos=videos, captions=captions,
            frames_per_video=args.frames, out_dir=Path(args.out),
        )
        summary = export(job, encoder)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for warning in summary.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    json.dump(
        {
            "exported": summary.exported,
            "skipped": summary.skipped,
            "manifest": summary.manifest_path,
            "frames_per_video": args.frames,
        },
        sys.stdout,
        indent=2,
    )
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
