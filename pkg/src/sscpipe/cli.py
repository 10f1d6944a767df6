"""Command-line interface: scene generation, inference, gradient checks,
toy training and the ablation grid."""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import gradsuite
from .config import PipelineConfig
from .losses import metrics_report, metrics_table
from .pipeline import Pipeline, ablate, save_checkpoint, train_toy
from .scene import UNKNOWN, load_sample, make_sample, save_sample


def _log(msg: str) -> None:
    print(msg, flush=True)


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.load(path)


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    cfg = _load_config(args.config)
    dims = tuple(int(v) for v in args.dims.split(",")) if args.dims else cfg.grid_dims
    if len(dims) != 3:
        _log(f"error: --dims expects three comma-separated integers, got {args.dims!r}")
        return 2
    sample = make_sample(seed=args.seed, dims=dims, num_classes=cfg.total_classes(),
                         rig=cfg.rig(), disp_bins=cfg.disp_bins(), embed_dim=cfg.channels,
                         voxel_size_m=cfg.voxel_size_m, sharpness=cfg.cost_sharpness,
                         cost_noise=cfg.cost_noise, feature_noise=cfg.feature_noise,
                         cull_occluded=cfg.cull_occluded)
    save_sample(args.out, sample)
    labels = sample.grid.labels
    known = labels[labels != UNKNOWN]
    occ = known[known != 0]
    _log(f"wrote {args.out}")
    _log(f"grid {dims[0]}x{dims[1]}x{dims[2]}, seed {args.seed}")
    _log(f"occupancy: {occ.size}/{labels.size} voxels "
         f"({100.0 * occ.size / labels.size:.2f}%), "
         f"{labels.size - known.size} unknown")
    counts = np.bincount(known.astype(np.int64), minlength=cfg.total_classes())
    for c, n in enumerate(counts):
        _log(f"  class {c}: {int(n)} voxels")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    try:
        sample = load_sample(args.sample)
    except FileNotFoundError:
        _log(f"error: sample file not found: {args.sample}")
        return 2
    except Exception as exc:
        _log(f"error: could not parse sample file {args.sample}: {exc}")
        return 2
    if tuple(sample.grid.dims) != tuple(cfg.grid_dims):
        _log(f"error: sample grid dims {sample.grid.dims} do not match "
             f"config grid.dims {cfg.grid_dims}")
        return 2
    pipe = Pipeline(cfg)
    pred = pipe.predict(sample)
    from .losses import evaluate
    iou, per_class, miou = evaluate(pred, sample.grid, num_classes=cfg.total_classes())
    report = metrics_report(iou, per_class, miou)
    _atomic_write(args.out, report.encode())
    _log(report)
    _log(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    try:
        results = gradsuite.run_suite(module=args.module, corrupt=args.corrupt)
    except KeyError as exc:
        _log(f"error: {exc.args[0]}")
        return 2
    width = max(len(k) for k in results)
    failed = []
    for name, err in sorted(results.items()):
        status = "ok" if err <= gradsuite.THRESHOLD else "FAIL"
        _log(f"{name:<{width}}  max rel err {err:.3e}  {status}")
        if err > gradsuite.THRESHOLD:
            failed.append(name)
    if failed:
        _log(f"{len(failed)} gradient check(s) above threshold "
             f"{gradsuite.THRESHOLD:g}: {', '.join(failed)}")
        return 1
    _log(f"all {len(results)} gradient checks passed (threshold {gradsuite.THRESHOLD:g})")
    return 0


def cmd_train_toy(args) -> int:
    cfg = _load_config(args.config)
    _log("configuration:")
    for line in cfg.to_text().strip().splitlines():
        _log(f"  {line}")
    res = train_toy(cfg, log=_log, steps=args.steps, scenes=args.scenes)
    if res.diverged:
        _log("training aborted: loss became non-finite; checkpoint holds the "
             "last finite parameters")
    if args.checkpoint:
        save_checkpoint(args.checkpoint, res.pipeline.params())
        _log(f"wrote checkpoint {args.checkpoint}")
    drop = 0.0 if res.step0_loss == 0 else (res.step0_loss - res.final_loss) / res.step0_loss
    _log(f"loss: {res.step0_loss:.4f} -> {res.final_loss:.4f} "
         f"({100.0 * drop:.1f}% reduction)")
    _log(f"holdout: IoU {res.holdout_iou:.4f}, mIoU {res.holdout_miou:.4f}")
    return 1 if res.diverged else 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    rows = ablate(cfg, log=_log, steps=args.steps, scenes=args.scenes)
    _log("")
    _log(metrics_table(rows))
    if args.out:
        _atomic_write(args.out, json.dumps(rows, indent=2).encode())
        _log(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sscpipe",
                                description="desk-scale semantic scene completion pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene sample file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", type=str, default=None, help="X,Y,Z voxel dims")
    g.add_argument("--config", type=str, default=None)
    g.add_argument("--out", type=str, required=True)
    g.set_defaults(func=cmd_gen_scene)

    r = sub.add_parser("run", help="run inference on a sample and write metrics JSON")
    r.add_argument("--config", type=str, default=None)
    r.add_argument("--sample", type=str, required=True)
    r.add_argument("--out", type=str, required=True)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("gradcheck", help="finite-difference checks for all components")
    c.add_argument("--module", type=str, default=None,
                   help="restrict to checks whose name starts with this prefix")
    c.add_argument("--corrupt", type=str, default=None, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train-toy", help="train on procedural scenes and evaluate")
    t.add_argument("--config", type=str, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--scenes", type=int, default=None)
    t.add_argument("--checkpoint", type=str, default=None)
    t.set_defaults(func=cmd_train_toy)

    a = sub.add_parser("ablate", help="train/evaluate every depth x fusion cell")
    a.add_argument("--config", type=str, default=None)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--scenes", type=int, default=None)
    a.add_argument("--out", type=str, default=None)
    a.set_defaults(func=cmd_ablate)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        _log(f"error: file not found: {exc.filename or exc}")
        return 2
    except Exception as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
