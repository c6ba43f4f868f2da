"""End-to-end differentiable batch scoring, contrastive training, checkpoints.

A batch of B (video, query) pairs is scored over all B x B combinations
through the full pipeline (temporal encoding, patch selection,
three-level alignment, interactive aggregation) without any score
normalization; the symmetric contrastive objective pulls the diagonal up.
Adam with a cosine warm-up schedule optimizes every module parameter.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tape
from .alignment import (
    LevelSimilarities,
    frame_sentence_vector,
    patch_word_matrix,
    temporal_encode,
    video_sentence_score,
)
from .container import read_container, write_container
from .diffmath import AffineParams, AttentionParams, grad_check
from .errors import DataError, NumericError
from .isa import IsaParams, LevelScores, aggregate_baseline, isa_aggregate, bi_isa
from .patchsel import (
    FrozenSelectionNoise,
    MlpParams,
    Selection,
    SelectorParams,
    gather_selected,
    saliency_scores,
    select_topk,
    soft_indicator,
)
from .store import Manifest, load_dataset
from .tape import Tensor, backward, constant, leaf

ALL_LEVELS = ("vs", "fs", "pw")
FS_AGG_MODES = ("isa", "softmax", "mean")


@dataclass
class TrainConfig:
    """Dataset dimensions plus optimization hyperparameters."""

    C: int
    N: int
    M: int
    L_t: int
    K: int = 4
    batch_size: int = 16
    epochs: int = 200
    lr: float = 1e-4
    seed: int = 0
    sigma: float = 0.05
    n_samples: int = 100
    logit_scale: float = 100.0
    strict_mode: bool = False
    levels: tuple = ALL_LEVELS
    fs_agg: str = "isa"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1

    def validate(self) -> "TrainConfig":
        if min(self.C, self.N, self.M, self.L_t) < 1:
            raise DataError("config: all dimensions must be >= 1")
        if self.batch_size < 2:
            raise DataError(f"config: batch_size must be >= 2, got {self.batch_size}")
        if not 1 <= self.K <= self.M:
            raise DataError(f"config: K={self.K} outside [1, M={self.M}]")
        if self.sigma <= 0 or self.n_samples < 1:
            raise DataError("config: sigma must be > 0 and n_samples >= 1")
        if self.seed < 0:
            raise DataError("config: seed must be non-negative")
        if self.fs_agg not in FS_AGG_MODES:
            raise DataError(f"config: unknown fs_agg '{self.fs_agg}'")
        if not self.levels or any(l not in ALL_LEVELS for l in self.levels):
            raise DataError(f"config: levels must be a non-empty subset of {ALL_LEVELS}")
        if self.logit_scale <= 0:
            raise DataError("config: logit_scale must be positive")
        return self

    @property
    def l_v(self) -> int:
        return self.N * self.K

    @property
    def effective_logit_scale(self) -> float:
        # strict mode follows the loss equations literally (no temperature)
        return 1.0 if self.strict_mode else self.logit_scale


@dataclass
class ModelParams:
    """All trainable tensors plus the frozen temperature multiplier."""

    temporal: AttentionParams
    selector: SelectorParams
    isa_frame: IsaParams
    isa_patch: IsaParams
    isa_word: IsaParams
    logit_scale: float

    @classmethod
    def init(cls, config: TrainConfig, seed: int | None = None) -> "ModelParams":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        return cls(
            temporal=AttentionParams.init(config.N, config.C, rng),
            selector=SelectorParams.init(config.C, rng),
            isa_frame=IsaParams.identity(config.N),
            isa_patch=IsaParams.identity(config.l_v),
            isa_word=IsaParams.identity(config.L_t),
            logit_scale=config.effective_logit_scale,
        )

    def named_arrays(self):
        """Stable (name, array) iteration over every parameter tensor."""
        t = self.temporal
        yield "temporal_pos", t.pos
        yield "temporal_ln_gamma", t.ln_gamma
        yield "temporal_ln_beta", t.ln_beta
        for part in ("q", "k", "v", "o"):
            yield f"temporal_w{part}", getattr(t, f"w{part}")
            yield f"temporal_b{part}", getattr(t, f"b{part}")
        for head, mlp in (("ga", self.selector.g_a), ("gb", self.selector.g_b)):
            yield f"selector_{head}_first_w", mlp.first.weight
            yield f"selector_{head}_first_b", mlp.first.bias
            yield f"selector_{head}_second_w", mlp.second.weight
            yield f"selector_{head}_second_b", mlp.second.bias
        for name in ("isa_frame", "isa_patch", "isa_word"):
            isa_params = getattr(self, name)
            yield f"{name}_w", isa_params.linear.weight
            yield f"{name}_b", isa_params.linear.bias

    def to_tape(self):
        """Mirror of this structure with gradient leaves in place of arrays."""
        leaves = {name: leaf(arr) for name, arr in self.named_arrays()}
        return _params_from_values(leaves, self.logit_scale), leaves

    @staticmethod
    def expected_shapes(config: TrainConfig) -> dict[str, tuple]:
        c, n, l_v, l_t = config.C, config.N, config.l_v, config.L_t
        shapes = {
            "temporal_pos": (n, c), "temporal_ln_gamma": (c,), "temporal_ln_beta": (c,),
        }
        for part in ("q", "k", "v", "o"):
            shapes[f"temporal_w{part}"] = (c, c)
            shapes[f"temporal_b{part}"] = (c,)
        for head in ("ga", "gb"):
            out = c if head == "ga" else 1
            shapes[f"selector_{head}_first_w"] = (c, 2 * c)
            shapes[f"selector_{head}_first_b"] = (c,)
            shapes[f"selector_{head}_second_w"] = (out, c)
            shapes[f"selector_{head}_second_b"] = (out,)
        for name, d in (("isa_frame", n), ("isa_patch", l_v), ("isa_word", l_t)):
            shapes[f"{name}_w"] = (d, d)
            shapes[f"{name}_b"] = (d,)
        return shapes


def _params_from_values(values: dict, logit_scale: float) -> ModelParams:
    def aff(prefix):
        return AffineParams(values[f"{prefix}_w"], values[f"{prefix}_b"])

    temporal = AttentionParams(
        pos=values["temporal_pos"],
        ln_gamma=values["temporal_ln_gamma"],
        ln_beta=values["temporal_ln_beta"],
        wq=values["temporal_wq"], bq=values["temporal_bq"],
        wk=values["temporal_wk"], bk=values["temporal_bk"],
        wv=values["temporal_wv"], bv=values["temporal_bv"],
        wo=values["temporal_wo"], bo=values["temporal_bo"],
    )
    selector = SelectorParams(
        g_a=MlpParams(aff("selector_ga_first"), aff("selector_ga_second")),
        g_b=MlpParams(aff("selector_gb_first"), aff("selector_gb_second")),
    )
    return ModelParams(
        temporal=temporal,
        selector=selector,
        isa_frame=IsaParams(aff("isa_frame")),
        isa_patch=IsaParams(aff("isa_patch")),
        isa_word=IsaParams(aff("isa_word")),
        logit_scale=logit_scale,
    )


# -- forward pipeline ---------------------------------------------------


@dataclass
class _VideoCtx:
    frames: Tensor
    v: Tensor
    phat: Tensor | None


@dataclass
class _QueryCtx:
    sentence: Tensor
    words: Tensor
    valid_len: int


def _check_batch(bundles, queries, config: TrainConfig) -> None:
    for b in bundles:
        if b.frames.shape != (config.N, config.C) or b.patches.shape != (config.N, config.M, config.C):
            raise DataError(
                f"bundle '{b.id}' shapes {b.frames.shape}/{b.patches.shape} "
                f"do not match config (N={config.N}, M={config.M}, C={config.C})"
            )
    for q in queries:
        if q.words.shape != (config.L_t, config.C):
            raise DataError(
                f"query '{q.id}' words shape {q.words.shape} does not match "
                f"config (L_t={config.L_t}, C={config.C})"
            )


def _video_ctx(bundle, params, config, noise_bank=None) -> _VideoCtx:
    frames = constant(bundle.frames)
    v = temporal_encode(frames, params.temporal)
    phat = None
    if "pw" in config.levels:
        parts = []
        hard_rows = []
        for n in range(config.N):
            patches_n = constant(bundle.patches[n])
            u = saliency_scores(patches_n, constant(bundle.frames[n]), v, params.selector)
            if noise_bank is not None:
                frozen = noise_bank[(bundle.id, n)]
                parts.append(soft_indicator(u, frozen))
            else:
                hard_rows.append(select_topk(u.data, config.K))
        if noise_bank is not None:
            phat = gather_selected(constant(bundle.patches), Selection(indices=None, soft_indicators=parts))
        else:
            selection = Selection(indices=np.stack(hard_rows))
            phat = gather_selected(constant(bundle.patches), selection)
    return _VideoCtx(frames=frames, v=v, phat=phat)


def _query_ctx(query) -> _QueryCtx:
    return _QueryCtx(
        sentence=constant(query.sentence),
        words=constant(query.words),
        valid_len=query.valid_len,
    )


def _pair_levels(vc: _VideoCtx, qc: _QueryCtx, params, config) -> dict[str, Tensor]:
    out = {}
    if "vs" in config.levels:
        out["vs"] = video_sentence_score(vc.v, qc.sentence)
    if "fs" in config.levels:
        c_fs = frame_sentence_vector(vc.frames, qc.sentence)
        if config.fs_agg == "isa":
            out["fs"] = isa_aggregate(c_fs, params.isa_frame)
        else:
            out["fs"] = aggregate_baseline(c_fs, config.fs_agg)
    if "pw" in config.levels:
        c_pw, mask = patch_word_matrix(vc.phat, qc.words, qc.valid_len)
        out["pw"] = bi_isa(c_pw, params.isa_patch, params.isa_word, word_pad_mask=mask)
    return out


def make_selection_bank(bundles, params: ModelParams, config: TrainConfig, rng_factory):
    """Frozen perturbation samples per (video, frame), anchored at the
    current saliency scores. ``rng_factory(pos, frame)`` supplies the
    generator for each stream."""
    bank = {}
    for pos, bundle in enumerate(bundles):
        v0 = temporal_encode(np.asarray(bundle.frames, dtype=np.float64), params.temporal)
        for n in range(config.N):
            u0 = saliency_scores(
                np.asarray(bundle.patches[n], dtype=np.float64),
                np.asarray(bundle.frames[n], dtype=np.float64),
                v0,
                params.selector,
            )
            bank[(bundle.id, n)] = FrozenSelectionNoise.sample(
                u0, config.K, config.sigma, config.n_samples, rng_factory(pos, n)
            )
    return bank


def batch_scores(
    bundles,
    queries,
    params: ModelParams,
    config: TrainConfig,
    train_mode: bool = False,
    noise_bank=None,
) -> Tensor:
    """Score every (video, query) combination: R[i][j] = logit_scale *
    (sum of enabled level scores), no normalization.

    Training mode routes patch selection through the frozen soft
    indicators in ``noise_bank``; inference uses hard top-K.
    """
    if len(bundles) != len(queries):
        raise DataError(f"batch_scores: {len(bundles)} videos vs {len(queries)} queries")
    _check_batch(bundles, queries, config)
    if train_mode and "pw" in config.levels and noise_bank is None:
        raise DataError("batch_scores: train_mode requires a selection noise bank")
    video_ctxs = [_video_ctx(b, params, config, noise_bank if train_mode else None) for b in bundles]
    query_ctxs = [_query_ctx(q) for q in queries]
    grid = []
    for vc in video_ctxs:
        row = []
        for qc in query_ctxs:
            levels = _pair_levels(vc, qc, params, config)
            total = None
            for value in levels.values():
                total = value if total is None else tape.add(total, value)
            row.append(total)
        grid.append(row)
    return tape.scale(tape.stack_scalars(grid), params.logit_scale)


def score_pair(bundle, query, params: ModelParams, config: TrainConfig):
    """Inference-mode per-level scores of one (video, query) pair."""
    _check_batch([bundle], [query], config)
    levels = _pair_levels(_video_ctx(bundle, params, config), _query_ctx(query), params, config)
    return LevelScores(
        s_vs=float(levels["vs"].data) if "vs" in levels else 0.0,
        s_fs=float(levels["fs"].data) if "fs" in levels else 0.0,
        s_pw=float(levels["pw"].data) if "pw" in levels else 0.0,
    )


def pair_similarities(bundle, query, params: ModelParams, config: TrainConfig) -> LevelSimilarities:
    """Raw pre-aggregation similarity structures of one pair, for inspection.

    Always computes all three levels regardless of ``config.levels``.
    """
    _check_batch([bundle], [query], config)
    vc = _video_ctx(bundle, params, dataclasses.replace(config, levels=ALL_LEVELS))
    qc = _query_ctx(query)
    c_pw, mask = patch_word_matrix(vc.phat, qc.words, qc.valid_len)
    return LevelSimilarities(
        s_vs=float(video_sentence_score(vc.v, qc.sentence).data),
        c_fs=frame_sentence_vector(vc.frames, qc.sentence).data,
        c_pw=c_pw.data,
        word_mask=mask,
    )


def level_score_matrices(bundles, queries, params: ModelParams, config: TrainConfig):
    """Inference-mode per-level score matrices over all videos x queries
    (unscaled raw level scores, hard patch selection)."""
    _check_batch(bundles, queries, config)
    video_ctxs = [_video_ctx(b, params, config) for b in bundles]
    query_ctxs = [_query_ctx(q) for q in queries]
    grids = {name: np.zeros((len(bundles), len(queries))) for name in config.levels}
    for i, vc in enumerate(video_ctxs):
        for j, qc in enumerate(query_ctxs):
            for name, value in _pair_levels(vc, qc, params, config).items():
                grids[name][i, j] = float(value.data)
    return grids


def contrastive_loss(r) -> Tensor:
    """Symmetric cross-modal contrastive objective with diagonal positives."""
    rt = r if isinstance(r, Tensor) else constant(r)
    if rt.data.ndim != 2 or rt.data.shape[0] != rt.data.shape[1]:
        raise DataError(f"contrastive_loss expects a square matrix, got {rt.data.shape}")
    if not np.all(np.isfinite(rt.data)):
        raise NumericError("contrastive_loss: non-finite scores")
    positives = tape.diag(rt)
    loss_v2t = tape.mean_all(tape.sub(tape.logsumexp(rt, axis=1), positives))
    loss_t2v = tape.mean_all(tape.sub(tape.logsumexp(rt, axis=0), positives))
    out = tape.add(loss_v2t, loss_t2v)
    return out if isinstance(r, Tensor) else out.data


# -- optimization -------------------------------------------------------


class Adam:
    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.98, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros(arr.shape) for name, arr in params.named_arrays()}
        self.v = {name: np.zeros(arr.shape) for name, arr in params.named_arrays()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict, lr: float) -> None:
        self.t += 1
        for name, arr in params.named_arrays():
            g = grads.get(name)
            if g is None:
                g = np.zeros(arr.shape)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            updated = arr.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            arr[...] = updated  # storage stays float32


def cosine_warmup_lr(step: int, total_steps: int, lr: float, warmup_frac: float) -> float:
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step < warmup:
        return lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    return lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def _aligned_pairs(bundles, queries, manifest: Manifest):
    """Partner query for each bundle, in bundle order."""
    entry_by_id = {e.id: e for e in manifest.videos()}
    query_by_id = {q.id: q for q in queries}
    pairs = []
    for bundle in bundles:
        entry = entry_by_id.get(bundle.id)
        if entry is None:
            raise DataError(f"video '{bundle.id}' is not in the manifest")
        if not entry.gt_partner_ids:
            raise DataError(f"video '{bundle.id}' has no ground-truth query")
        partner = entry.gt_partner_ids[0]
        if partner not in query_by_id:
            raise DataError(f"video '{bundle.id}': partner query '{partner}' not loaded")
        pairs.append(query_by_id[partner])
    return pairs


def train(data, config: TrainConfig, checkpoint_path=None):
    """Optimize model parameters on paired data; returns (params, loss curve).

    ``data`` is either a manifest path or a (bundles, queries, manifest)
    triple. Deterministic for a fixed config seed: data order, init, and
    perturbation noise all derive from it. The loss curve holds one mean
    loss per epoch.
    """
    config.validate()
    if isinstance(data, (str, Path)):
        bundles, queries, manifest = load_dataset(data)
    else:
        bundles, queries, manifest = data
    paired_queries = _aligned_pairs(bundles, queries, manifest)
    n_pairs = len(bundles)
    if n_pairs < config.batch_size:
        raise DataError(f"dataset has {n_pairs} pairs, need >= batch_size {config.batch_size}")
    _check_batch(bundles, paired_queries, config)

    params = ModelParams.init(config)
    adam = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    order_rng = np.random.default_rng((config.seed, 0xDA7A))
    steps_per_epoch = n_pairs // config.batch_size
    total_steps = max(1, config.epochs * steps_per_epoch)
    curve = []
    global_step = 0
    for _epoch in range(config.epochs):
        perm = order_rng.permutation(n_pairs)
        epoch_losses = []
        for step_in_epoch in range(steps_per_epoch):
            chunk = perm[step_in_epoch * config.batch_size : (step_in_epoch + 1) * config.batch_size]
            batch_bundles = [bundles[i] for i in chunk]
            batch_queries = [paired_queries[i] for i in chunk]
            # noise streams keyed by (seed, step slot, dataset index, frame):
            # resampled across steps, repeatable across epochs so a frozen
            # optimizer (lr=0) sees a constant loss
            bank = None
            if "pw" in config.levels:
                bank = make_selection_bank(
                    batch_bundles,
                    params,
                    config,
                    lambda pos, frame: np.random.default_rng(
                        (config.seed, step_in_epoch, int(chunk[pos]), frame)
                    ),
                )
            tape_params, leaves = params.to_tape()
            scores = batch_scores(
                batch_bundles, batch_queries, tape_params, config,
                train_mode=True, noise_bank=bank,
            )
            loss = contrastive_loss(scores)
            if not np.isfinite(loss.data):
                raise NumericError(f"training diverged at step {global_step}")
            backward(loss)
            grads = {name: lf.grad for name, lf in leaves.items()}
            adam.step(params, grads, cosine_warmup_lr(global_step, total_steps, config.lr, config.warmup_frac))
            epoch_losses.append(float(loss.data))
            global_step += 1
        curve.append(float(np.mean(epoch_losses)))
    if checkpoint_path is not None:
        save_checkpoint(params, config, checkpoint_path)
    return params, curve


# -- checkpoints --------------------------------------------------------


def save_checkpoint(params: ModelParams, config: TrainConfig, path) -> None:
    """UCFA container of parameter tensors plus a '<path>.json' sidecar."""
    write_container(dict(params.named_arrays()), path)
    sidecar = {
        "schema": 1,
        "N": config.N, "M": config.M, "K": config.K, "C": config.C, "L_t": config.L_t,
        "logit_scale": params.logit_scale,
        "strict_mode": config.strict_mode,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def load_checkpoint(path, config: TrainConfig | None = None):
    """Load (params, sidecar); validates tensor shapes against the sidecar
    dims and, when given, against the expected config."""
    tensors = read_container(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise DataError(f"missing checkpoint sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    ck_config = TrainConfig(
        C=int(sidecar["C"]), N=int(sidecar["N"]), M=int(sidecar["M"]),
        L_t=int(sidecar["L_t"]), K=int(sidecar["K"]),
        logit_scale=float(sidecar.get("logit_scale", 100.0)),
        strict_mode=bool(sidecar.get("strict_mode", False)),
    )
    expected = ModelParams.expected_shapes(config if config is not None else ck_config)
    mismatches = []
    for name, shape in expected.items():
        if name not in tensors:
            mismatches.append(f"{name} missing")
        elif tensors[name].shape != shape:
            mismatches.append(f"{name} expected {shape} got {tensors[name].shape}")
    if mismatches:
        raise DataError("checkpoint does not match config: " + "; ".join(mismatches))
    params = _params_from_values(
        {name: tensors[name] for name in expected},
        float(sidecar.get("logit_scale", 100.0)),
    )
    return params, sidecar


# -- gradient verification ----------------------------------------------


def training_grad_errors(bundles, queries, params: ModelParams, config: TrainConfig,
                         noise_bank=None, eps: float = 1e-4) -> dict[str, float]:
    """Per-tensor grad_check of contrastive_loss(batch_scores) with frozen
    selection noise; returns {tensor name: max relative error}."""
    names = [name for name, _ in params.named_arrays()]
    arrays = [arr for _, arr in params.named_arrays()]
    train_mode = "pw" in config.levels and noise_bank is not None

    def loss_of(*leaves):
        mirror = _params_from_values(dict(zip(names, leaves)), params.logit_scale)
        scores = batch_scores(bundles, queries, mirror, config,
                              train_mode=train_mode, noise_bank=noise_bank)
        return contrastive_loss(scores)

    errors = {}
    for i, name in enumerate(names):
        def fn(leaf_tensor, _i=i):
            mixed = [constant(a) for a in arrays]
            mixed[_i] = leaf_tensor
            return loss_of(*mixed)

        errors[name] = grad_check(fn, [arrays[i]], eps=eps)
    return errors
