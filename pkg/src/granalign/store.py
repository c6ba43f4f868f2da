"""Feature containers, manifest handling, and synthetic dataset generation.

Features arrive pre-extracted: a video is an (N, C) frame matrix plus an
(N, M, C) patch tensor, a query is an (L_t, C) word matrix plus a (C,)
sentence vector with a valid-length prefix (padding rows beyond
``valid_len`` are ignored by all downstream softmaxes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import DataError


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")


@dataclass
class FeatureBundle:
    """Pre-extracted visual features of one video."""

    id: str
    frames: np.ndarray  # (N, C)
    patches: np.ndarray  # (N, M, C)

    def validate(self) -> "FeatureBundle":
        if self.frames.ndim != 2:
            raise DataError(f"bundle '{self.id}': frames must be 2-D, got rank {self.frames.ndim}")
        if self.patches.ndim != 3:
            raise DataError(f"bundle '{self.id}': patches must be 3-D, got rank {self.patches.ndim}")
        n, c = self.frames.shape
        if n < 1 or c < 1:
            raise DataError(f"bundle '{self.id}': frames shape {self.frames.shape} has empty dim")
        if self.patches.shape[0] != n or self.patches.shape[2] != c:
            raise DataError(
                f"bundle '{self.id}': patches shape {self.patches.shape} "
                f"inconsistent with frames shape {self.frames.shape}"
            )
        if self.patches.shape[1] < 1:
            raise DataError(f"bundle '{self.id}': zero patches per frame")
        _check_finite(f"bundle '{self.id}' frames", self.frames)
        _check_finite(f"bundle '{self.id}' patches", self.patches)
        return self

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class QueryFeatures:
    """Pre-extracted textual features of one query."""

    id: str
    words: np.ndarray  # (L_t, C)
    sentence: np.ndarray  # (C,)
    valid_len: int

    def validate(self) -> "QueryFeatures":
        if self.words.ndim != 2:
            raise DataError(f"query '{self.id}': words must be 2-D, got rank {self.words.ndim}")
        if self.sentence.ndim != 1:
            raise DataError(f"query '{self.id}': sentence must be 1-D")
        l_t, c = self.words.shape
        if l_t < 1 or c < 1:
            raise DataError(f"query '{self.id}': words shape {self.words.shape} has empty dim")
        if self.sentence.shape[0] != c:
            raise DataError(
                f"query '{self.id}': sentence dim {self.sentence.shape[0]} != word dim {c}"
            )
        if not 1 <= self.valid_len <= l_t:
            raise DataError(f"query '{self.id}': valid_len {self.valid_len} outside [1, {l_t}]")
        _check_finite(f"query '{self.id}' words", self.words)
        _check_finite(f"query '{self.id}' sentence", self.sentence)
        return self

    @property
    def pad_mask(self) -> np.ndarray:
        """Boolean (L_t,) mask, True marks padding rows to exclude."""
        return np.arange(self.words.shape[0]) >= self.valid_len


@dataclass
class ManifestEntry:
    id: str
    kind: str  # "video" | "query"
    path: str
    gt_partner_ids: list[str] = field(default_factory=list)


@dataclass
class Manifest:
    entries: list[ManifestEntry]

    def validate(self) -> "Manifest":
        by_kind: dict[str, set[str]] = {"video": set(), "query": set()}
        for e in self.entries:
            if e.kind not in by_kind:
                raise DataError(f"manifest entry '{e.id}': unknown kind '{e.kind}'")
            if e.id in by_kind[e.kind]:
                raise DataError(f"manifest: duplicate {e.kind} id '{e.id}'")
            by_kind[e.kind].add(e.id)
        if not by_kind["video"] or not by_kind["query"]:
            raise DataError("manifest must contain at least one video and one query")
        for e in self.entries:
            partner_kind = "query" if e.kind == "video" else "video"
            for pid in e.gt_partner_ids:
                if pid not in by_kind[partner_kind]:
                    raise DataError(
                        f"manifest entry '{e.id}': gt_partner_id '{pid}' "
                        f"does not resolve to a {partner_kind}"
                    )
        return self

    def videos(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.kind == "video"]

    def queries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.kind == "query"]

    def save(self, path: str | Path) -> None:
        payload = [
            {"id": e.id, "kind": e.kind, "path": e.path, "gt_partner_ids": e.gt_partner_ids}
            for e in self.entries
        ]
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path}: invalid JSON ({exc})") from exc
        if not isinstance(payload, list):
            raise DataError(f"manifest {path}: expected a JSON array")
        entries = []
        for i, raw in enumerate(payload):
            try:
                entries.append(
                    ManifestEntry(
                        id=raw["id"],
                        kind=raw["kind"],
                        path=raw["path"],
                        gt_partner_ids=list(raw.get("gt_partner_ids", [])),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise DataError(f"manifest {path}: malformed entry {i}: {exc}") from exc
        return cls(entries).validate()


def save_bundle(bundle: FeatureBundle, path: str | Path) -> None:
    bundle.validate()
    write_container({"frames": bundle.frames, "patches": bundle.patches}, path)


def load_bundle(path: str | Path, bundle_id: str) -> FeatureBundle:
    tensors = read_container(path)
    for key in ("frames", "patches"):
        if key not in tensors:
            raise DataError(f"{path}: missing tensor '{key}'")
    return FeatureBundle(id=bundle_id, frames=tensors["frames"], patches=tensors["patches"]).validate()


def save_query(query: QueryFeatures, path: str | Path) -> None:
    query.validate()
    mask = (np.arange(query.words.shape[0]) < query.valid_len).astype(np.float32)
    write_container({"words": query.words, "sentence": query.sentence, "mask": mask}, path)


def load_query(path: str | Path, query_id: str) -> QueryFeatures:
    tensors = read_container(path)
    for key in ("words", "sentence", "mask"):
        if key not in tensors:
            raise DataError(f"{path}: missing tensor '{key}'")
    mask = tensors["mask"]
    if mask.ndim != 1 or mask.shape[0] != tensors["words"].shape[0]:
        raise DataError(f"{path}: mask shape {mask.shape} inconsistent with words")
    if not np.all(np.isin(mask, (0.0, 1.0))):
        raise DataError(f"{path}: mask must contain only 0/1 values")
    valid_len = int(mask.sum())
    # the valid region is a prefix: 1s followed by 0s
    if not np.all(mask[:valid_len] == 1.0):
        raise DataError(f"{path}: mask valid region is not a prefix")
    return QueryFeatures(
        id=query_id, words=tensors["words"], sentence=tensors["sentence"], valid_len=valid_len
    ).validate()


def gen_synthetic(
    num_pairs: int,
    C: int,
    N: int,
    M: int,
    L_t: int,
    noise: float,
    seed: int,
) -> tuple[list[FeatureBundle], list[QueryFeatures], Manifest]:
    """Deterministic paired synthetic dataset for desk-scale testing.

    Pair i shares a latent unit vector z_i; video features are z_i
    broadcast plus i.i.d. Gaussian noise of scale *noise*, query features
    likewise. Pair i's video and query link to each other in the manifest.
    Pure function of its arguments.
    """
    if min(num_pairs, C, N, M, L_t) < 1:
        raise DataError("gen_synthetic: all dimensions must be >= 1")
    if noise < 0:
        raise DataError(f"gen_synthetic: noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    bundles, queries, entries = [], [], []
    for i in range(num_pairs):
        z = rng.normal(size=C)
        z /= np.linalg.norm(z)
        frames = z[None, :] + noise * rng.normal(size=(N, C))
        patches = z[None, None, :] + noise * rng.normal(size=(N, M, C))
        valid_len = L_t - (i % min(3, L_t))  # cycle a few lengths to exercise masking
        words = np.zeros((L_t, C))
        words[:valid_len] = z[None, :] + noise * rng.normal(size=(valid_len, C))
        sentence = z + noise * rng.normal(size=C)
        vid, qid = f"vid{i:04d}", f"qry{i:04d}"
        bundles.append(
            FeatureBundle(
                id=vid, frames=frames.astype(np.float32), patches=patches.astype(np.float32)
            ).validate()
        )
        queries.append(
            QueryFeatures(
                id=qid,
                words=words.astype(np.float32),
                sentence=sentence.astype(np.float32),
                valid_len=valid_len,
            ).validate()
        )
        entries.append(ManifestEntry(id=vid, kind="video", path=f"{vid}.ucfa", gt_partner_ids=[qid]))
        entries.append(ManifestEntry(id=qid, kind="query", path=f"{qid}.ucfa", gt_partner_ids=[vid]))
    return bundles, queries, Manifest(entries).validate()


def write_dataset(
    bundles: list[FeatureBundle],
    queries: list[QueryFeatures],
    manifest: Manifest,
    out_dir: str | Path,
) -> Path:
    """Write one container per item plus manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {e.id: e.path for e in manifest.entries}
    for bundle in bundles:
        save_bundle(bundle, out / paths[bundle.id])
    for query in queries:
        save_query(query, out / paths[query.id])
    manifest_path = out / "manifest.json"
    manifest.save(manifest_path)
    return manifest_path


def load_dataset(
    manifest_path: str | Path,
) -> tuple[list[FeatureBundle], list[QueryFeatures], Manifest]:
    """Load every bundle and query referenced by a manifest."""
    manifest_path = Path(manifest_path)
    manifest = Manifest.load(manifest_path)
    base = manifest_path.parent
    bundles = [load_bundle(base / e.path, e.id) for e in manifest.videos()]
    queries = [load_query(base / e.path, e.id) for e in manifest.queries()]
    return bundles, queries, manifest
