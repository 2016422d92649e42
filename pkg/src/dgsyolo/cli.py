"""Command-line entry point: ``dgsyolo <command> ...``.

Exit codes: 0 success, 1 invalid input (flags, files, configs,
checkpoints), 2 numeric failure (non-finite values, divergence, failed
gradient check).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .bench import detect, run_bench
from .blocks import fold_batchnorm
from .data import (
    DataError,
    draw_boxes,
    image_paths,
    labels_to_boxes,
    load_image,
    load_sample,
    save_image,
    split_dataset,
    synthetic_dataset,
    write_dataset,
)
from .loss import format_curve, train_tiny
from .model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    build_model,
    count_params,
    load_checkpoint,
    load_config,
    save_checkpoint,
    summarize,
    zero_model,
)
from .postprocess import Detection, GroundTruth, evaluate
from .tensor import NumericError, ShapeError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DGS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DGS_SEED must be an integer, got {env!r}") from None


def _config(args) -> ModelConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return ModelConfig.preset(getattr(args, "preset", None) or "dgst-dgsm")


def _load(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else None
    return load_checkpoint(args.ckpt, cfg)


def _detections(model, image, conf, iou) -> list[Detection]:
    """Detections in original-image pixels, degenerate boxes after unpadding dropped."""
    (boxes, ids, scores, tf), _ = detect(model, image, conf, iou)
    out = []
    for b, c, s in zip(boxes, ids, scores):
        box = tf.to_original(b)
        if box[2] > box[0] and box[3] > box[1]:
            out.append(Detection(box, int(c), float(s)))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_summary(args) -> int:
    cfg = _config(args)
    if args.size:
        cfg = replace(cfg, input_size=(args.size, args.size))
    model = build_model(cfg)
    rows = summarize(model)
    print(f"{'layer':<12} {'output':<20} {'params':>10} {'MACs':>14}")
    for r in rows:
        shape = "x".join(str(d) for d in r.out_shape[1:])
        print(f"{r.name:<12} {shape:<20} {r.params:>10,} {r.macs:>14,}")
    report = count_params(model)
    macs = sum(r.macs for r in rows)
    print(f"{'total':<12} {'':<20} {report.total:>10,} {macs:>14,}")
    print(f"params {report.total / 1e6:.3f}M  GMACs {macs / 1e9:.3f} at {cfg.input_size[0]}x{cfg.input_size[1]}")
    return EXIT_OK


def cmd_init(args) -> int:
    model = build_model(_config(args), seed=_seed(args))
    if args.zero:
        zero_model(model)
    save_checkpoint(model, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = fold_batchnorm(_load(args))
    image = load_image(args.image)
    dets = _detections(model, image, args.conf, args.iou)
    for d in dets:
        print(d.to_line())
    if args.annotate:
        save_image(draw_boxes(image, [d.box for d in dets], thickness=2), args.annotate)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = fold_batchnorm(_load(args))
    nc = model.cfg.num_classes
    parts = dict(zip(("train", "val", "test"), split_dataset(image_paths(args.data), _seed(args))))
    preds, gts = [], []
    for path in parts[args.split]:
        sample = load_sample(path, nc)
        _, _, h, w = sample.image.shape
        preds.append(_detections(model, sample.image, args.conf, args.iou))
        gts.append([GroundTruth(box, c) for box, c in labels_to_boxes(sample.labels, h, w)])
    print(evaluate(preds, gts, num_classes=nc).row())
    return EXIT_OK


def cmd_bench(args) -> int:
    model = _load(args) if args.ckpt else build_model(_config(args), seed=_seed(args))
    report = run_bench(model, runs=args.runs, warmup=args.warmup, size=args.size, seed=_seed(args))
    print(report.HEADER)
    print(report.row())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _seed(args)
    failed = 0
    print(f"{'check':<22} {'max_rel_err':>12} {'tol':>8}  result")
    suites = [(name, gc.OP_TOLERANCE, lambda n=name: gc.run_op_check(n, seed)) for name in gc.OP_CASES]
    suites += [(name, gc.BLOCK_TOLERANCE, lambda n=name: gc.run_block_check(n, seed)) for name in gc.BLOCK_CASES]
    for name, tol, run in suites:
        res = run()
        ok = res.passed(tol)
        failed += not ok
        print(f"{name:<22} {res.max_rel_error:>12.3e} {tol:>8.0e}  {'PASS' if ok else 'FAIL'}")
    print(f"{len(suites) - failed}/{len(suites)} passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_train_tiny(args) -> int:
    cfg = _config(args)
    cfg = replace(cfg, input_size=(args.size, args.size))
    seed = _seed(args)
    samples = [load_sample(p, cfg.num_classes) for p in image_paths(args.data)]
    if not samples:
        raise DataError(f"{args.data}: no images found")
    model = build_model(cfg, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = train_tiny(model, samples, steps=args.steps, lr=args.lr, seed=seed, batch_size=args.batch)
    (out / "loss_curve.txt").write_text(format_curve(history), encoding="utf-8")
    save_checkpoint(model, out / "model.dgsd")
    first, last = history[0].total, history[-1].total
    print(f"steps {len(history)}  loss {first:.6g} -> {last:.6g}  ({first / last:.1f}x)")
    return EXIT_OK


def cmd_synth(args) -> int:
    write_dataset(synthetic_dataset(args.count, args.size, seed=_seed(args)), args.out)
    print(f"wrote {args.count} images to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _model_flags(p, ckpt: bool) -> None:
    if ckpt:
        p.add_argument("--ckpt", required=True, help="checkpoint file")
        p.add_argument("--config", help="build the graph from this config instead of the embedded one")
    else:
        p.add_argument("--config", help="model config file (key = value lines)")
        p.add_argument("--preset", help="named model variant (default dgst-dgsm)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgsyolo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="per-layer parameter and MAC table")
    _model_flags(p, ckpt=False)
    p.add_argument("--size", type=int, help="square input size (default from config)")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("init", help="write a freshly initialized checkpoint")
    _model_flags(p, ckpt=False)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--zero", action="store_true", help="set every tensor to zero")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("infer", help="detect objects in one image")
    _model_flags(p, ckpt=True)
    p.add_argument("--image", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--iou", type=float, default=0.45)
    p.add_argument("--annotate", help="write a PPM copy with box outlines")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="precision, recall, mAP and F1 on a dataset split")
    _model_flags(p, ckpt=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, help="split seed (falls back to DGS_SEED, then 0)")
    p.add_argument("--conf", type=float, default=0.001)
    p.add_argument("--iou", type=float, default=0.45)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="single-threaded timing")
    p.add_argument("--ckpt", help="checkpoint file (omit to bench a fresh --preset/--config)")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--size", type=int, default=640)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-tiny", help="train on a small dataset and write curve + checkpoint")
    _model_flags(p, ckpt=False)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, default=64, help="square training input size")
    p.add_argument("--batch", type=int, help="minibatch size (default: whole dataset)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_tiny)

    p = sub.add_parser("synth", help="write a synthetic rectangles dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ConfigError, DataError, ShapeError, UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
