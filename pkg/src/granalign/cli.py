"""Command-line surface tying the modules together.

Subcommands: gen-synthetic, train, score, sk-norm, eval, grad-check.
Machine-readable JSON reports go to stdout; human-readable errors to
stderr. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import trainer as trainer_mod
from .container import read_container, write_container
from .errors import DataError, NumericError, UsageError
from .evalmetrics import compute_metrics
from .store import Manifest, gen_synthetic, load_dataset, write_dataset
from .trainer import TrainConfig, load_checkpoint, level_score_matrices, train
from .unify import ScoreMatrix, apply_bias, sinkhorn_bias, unify_levels

SCHEMA = 1
LEVEL_TENSORS = {"vs": "s_vs", "fs": "s_fs", "pw": "s_pw"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(report: dict) -> None:
    report = {"schema": SCHEMA, **report}
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _load_score_file(path):
    tensors = read_container(path)
    sidecar_file = _sidecar_path(path)
    if not sidecar_file.exists():
        raise DataError(f"missing score sidecar {sidecar_file}")
    sidecar = json.loads(sidecar_file.read_text(encoding="utf-8"))
    row_ids = list(sidecar["row_ids"])
    col_ids = list(sidecar["col_ids"])
    return tensors, row_ids, col_ids


def _write_score_file(path, tensors, row_ids, col_ids, extra=None):
    write_container(tensors, path)
    sidecar = {"schema": SCHEMA, "row_ids": row_ids, "col_ids": col_ids}
    if extra:
        sidecar.update(extra)
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def _infer_dims(bundles, queries) -> dict:
    b, q = bundles[0], queries[0]
    return {"N": b.frames.shape[0], "C": b.frames.shape[1], "M": b.patches.shape[1], "L_t": q.words.shape[0]}


def _config_from_args(args, bundles, queries) -> TrainConfig:
    dims = _infer_dims(bundles, queries)
    return TrainConfig(
        C=dims["C"], N=dims["N"], M=dims["M"], L_t=dims["L_t"],
        K=args.k, batch_size=args.batch_size, epochs=args.epochs, lr=args.lr,
        seed=args.seed, sigma=args.sigma, n_samples=args.n_samples,
        logit_scale=args.logit_scale, strict_mode=args.strict,
        levels=tuple(args.levels.split(",")), fs_agg=args.fs_agg,
    ).validate()


def _cmd_gen_synthetic(args) -> None:
    bundles, queries, manifest = gen_synthetic(
        args.pairs, args.dim, args.frames, args.patches, args.words, args.noise, args.seed
    )
    manifest_path = write_dataset(bundles, queries, manifest, args.out)
    _emit({
        "command": "gen-synthetic",
        "manifest": str(manifest_path),
        "pairs": args.pairs,
        "dims": {"C": args.dim, "N": args.frames, "M": args.patches, "L_t": args.words},
    })


def _cmd_train(args) -> None:
    bundles, queries, manifest = load_dataset(args.manifest)
    config = _config_from_args(args, bundles, queries)
    params, curve = train((bundles, queries, manifest), config, checkpoint_path=args.out)
    _emit({
        "command": "train",
        "checkpoint": str(args.out),
        "epochs": config.epochs,
        "final_loss": curve[-1],
        "loss_curve": curve,
    })


def _cmd_score(args) -> None:
    bundles, queries, manifest = load_dataset(args.manifest)
    sidecar_cfg = json.loads(_sidecar_path(args.checkpoint).read_text(encoding="utf-8")) \
        if _sidecar_path(args.checkpoint).exists() else None
    if sidecar_cfg is None:
        raise DataError(f"missing checkpoint sidecar {_sidecar_path(args.checkpoint)}")
    dims = _infer_dims(bundles, queries)
    config = TrainConfig(
        C=dims["C"], N=dims["N"], M=dims["M"], L_t=dims["L_t"], K=int(sidecar_cfg["K"]),
        logit_scale=float(sidecar_cfg.get("logit_scale", 100.0)),
        strict_mode=bool(sidecar_cfg.get("strict_mode", False)),
    )
    params, _ = load_checkpoint(args.checkpoint, config)
    grids = level_score_matrices(bundles, queries, params, config)
    row_ids = [b.id for b in bundles]
    col_ids = [q.id for q in queries]
    _write_score_file(
        args.out,
        {LEVEL_TENSORS[name]: grid.astype(np.float32) for name, grid in grids.items()},
        row_ids, col_ids,
    )
    _emit({"command": "score", "out": str(args.out), "videos": len(row_ids), "queries": len(col_ids)})


def _level_matrices_from_tensors(tensors, row_ids, col_ids):
    if "scores" in tensors:
        return [ScoreMatrix(np.asarray(tensors["scores"], dtype=np.float64), row_ids, col_ids, "vs")], True
    missing = [t for t in LEVEL_TENSORS.values() if t not in tensors]
    if missing:
        raise DataError(f"score file lacks tensors {missing} (and no single 'scores' tensor)")
    mats = [
        ScoreMatrix(np.asarray(tensors[LEVEL_TENSORS[name]], dtype=np.float64), row_ids, col_ids, name)
        for name in ("vs", "fs", "pw")
    ]
    return mats, False


def _cmd_sk_norm(args) -> None:
    tensors, row_ids, col_ids = _load_score_file(args.scores)
    ref_tensors = ref_cols = None
    if args.ref:
        ref_tensors, ref_rows, ref_cols = _load_score_file(args.ref)
        if ref_rows != row_ids:
            raise DataError("reference score rows do not match test score rows")
    if "scores" in tensors:
        if ref_tensors is not None and "scores" not in ref_tensors:
            raise DataError("reference file must carry a single 'scores' tensor too")
        s = np.asarray(tensors["scores"], dtype=np.float64)
        ref = np.asarray(ref_tensors["scores"], dtype=np.float64) if ref_tensors else s
        normalized = apply_bias(s, sinkhorn_bias(ref, args.iters))
        meta = {"n_iter": args.iters, "self_reference": ref_tensors is None}
        _write_score_file(
            args.out, {"scores": normalized.astype(np.float32)}, row_ids, col_ids,
            extra={"sk": meta},
        )
        _emit({"command": "sk-norm", "out": str(args.out), **meta})
        return
    mats, _ = _level_matrices_from_tensors(tensors, row_ids, col_ids)
    ref_levels = None
    if ref_tensors is not None:
        ref_levels, _ = _level_matrices_from_tensors(ref_tensors, row_ids, ref_cols)
    result = unify_levels(mats, ref_levels, n_iter=args.iters, normalize=True)
    out_tensors = {LEVEL_TENSORS[m.level]: np.asarray(m.values, dtype=np.float32) for m in mats}
    out_tensors["r"] = result.scores.values.astype(np.float32)
    _write_score_file(args.out, out_tensors, row_ids, col_ids, extra={"sk": result.meta()})
    _emit({"command": "sk-norm", "out": str(args.out), **result.meta()})


def _gt_map(manifest: Manifest, row_ids, col_ids) -> dict[int, int]:
    row_index = {vid: i for i, vid in enumerate(row_ids)}
    col_index = {qid: j for j, qid in enumerate(col_ids)}
    gt = {}
    for entry in manifest.queries():
        if entry.id not in col_index:
            continue
        if not entry.gt_partner_ids:
            raise DataError(f"query '{entry.id}' has no ground-truth video")
        partner = entry.gt_partner_ids[0]
        if partner not in row_index:
            raise DataError(f"query '{entry.id}' ground truth '{partner}' not in score rows")
        gt[col_index[entry.id]] = row_index[partner]
    if len(gt) != len(col_ids):
        raise DataError("some score columns have no ground-truth mapping")
    return gt


def _cmd_eval(args) -> None:
    tensors, row_ids, col_ids = _load_score_file(args.scores)
    manifest = Manifest.load(args.gt)
    gt = _gt_map(manifest, row_ids, col_ids)
    meta = {}
    if "r" in tensors and not args.sk_norm:
        final = np.asarray(tensors["r"], dtype=np.float64)
    elif "scores" in tensors:
        final = np.asarray(tensors["scores"], dtype=np.float64)
        if args.sk_norm:
            final = apply_bias(final, sinkhorn_bias(final, args.sk_iters))
            meta["sk"] = {"n_iter": args.sk_iters, "self_reference": True}
    else:
        mats, _ = _level_matrices_from_tensors(tensors, row_ids, col_ids)
        refs = None
        if args.sk_ref:
            ref_tensors, ref_rows, ref_cols = _load_score_file(args.sk_ref)
            if ref_rows != row_ids:
                raise DataError("reference score rows do not match test score rows")
            refs, _ = _level_matrices_from_tensors(ref_tensors, ref_rows, ref_cols)
        result = unify_levels(mats, refs, n_iter=args.sk_iters, normalize=args.sk_norm)
        final = result.scores.values
        meta["sk"] = result.meta()
    report = compute_metrics(final, gt, args.direction)
    _emit({"command": "eval", **report.to_dict(), **meta})


def _cmd_grad_check(args) -> None:
    from .store import gen_synthetic as gen

    # strict mode on noisy data keeps the loss away from saturation, and a
    # random parameter offset wakes up every gradient path
    bundles, queries, _ = gen(4, 8, 3, 4, 3, 0.5, args.seed)
    config = TrainConfig(C=8, N=3, M=4, K=2, L_t=3, batch_size=4, sigma=args.sigma,
                         n_samples=args.n_samples, seed=args.seed, strict_mode=True).validate()
    params = trainer_mod.ModelParams.init(config)
    rng = np.random.default_rng(args.seed + 1)
    for _, arr in params.named_arrays():
        arr[...] = arr + (0.2 * rng.normal(size=arr.shape)).astype(np.float32)
    bank = trainer_mod.make_selection_bank(
        bundles, params, config,
        lambda pos, frame: np.random.default_rng((args.seed, pos, frame)),
    )
    errors = trainer_mod.training_grad_errors(bundles, queries, params, config, noise_bank=bank)
    selector = {k: v for k, v in errors.items() if k.startswith("selector")}
    others = {k: v for k, v in errors.items() if not k.startswith("selector")}
    ok = bool(max(others.values()) < 1e-4 and max(selector.values()) < 1e-3)
    _emit({
        "command": "grad-check",
        "max_error": max(errors.values()),
        "max_error_selector_path": max(selector.values()),
        "max_error_other": max(others.values()),
        "per_tensor": errors,
        "ok": ok,
    })
    if not ok:
        raise NumericError("gradient check exceeded tolerance")


def build_parser() -> _Parser:
    parser = _Parser(prog="granalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a deterministic synthetic dataset")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--dim", type=int, required=True, help="feature dimension C")
    p.add_argument("--frames", type=int, required=True, help="frames per video N")
    p.add_argument("--patches", type=int, required=True, help="patches per frame M")
    p.add_argument("--words", type=int, required=True, help="padded words per query L_t")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_synthetic)

    p = sub.add_parser("train", help="train on a manifest and write a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=4, help="patches kept per frame")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--logit-scale", type=float, default=100.0)
    p.add_argument("--strict", action="store_true", help="paper-literal loss (no temperature)")
    p.add_argument("--levels", default="vs,fs,pw")
    p.add_argument("--fs-agg", default="isa", choices=["isa", "softmax", "mean"])
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("score", help="emit per-level score matrices for a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("sk-norm", help="standalone Sinkhorn bias + apply")
    p.add_argument("--scores", required=True)
    p.add_argument("--ref", default=None, help="reference scores (test videos x train queries)")
    p.add_argument("--iters", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sk_norm)

    p = sub.add_parser("eval", help="retrieval metrics from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--gt", required=True, help="manifest with gt_partner_ids")
    p.add_argument("--direction", default="t2v", choices=["t2v", "v2t"])
    p.add_argument("--sk-norm", action="store_true")
    p.add_argument("--sk-ref", default=None)
    p.add_argument("--sk-iters", type=int, default=4)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of the training gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--n-samples", type=int, default=100)
    p.set_defaults(fn=_cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.fn(args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
