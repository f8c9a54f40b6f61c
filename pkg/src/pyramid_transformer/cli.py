"""Command-line entry point: gen, train, infer, eval, gradcheck, shapes."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import build_backbone, forward_pyramid, load_config
from .detection_eval import (
    detections_from_json,
    detections_to_json,
    evaluate,
    ground_truth_from_json,
    read_json,
    write_json,
)
from .gradsuite import TOLERANCE, run_gradient_suite
from .harness.synthetic import gen_dataset, read_dataset, write_dataset
from .harness.train import BATCH_SIZE, infer, load_detector, save_detector, train_toy
from .tensor import no_grad


def cmd_gen(args) -> int:
    scenes = gen_dataset(args.seed, args.n_scenes, args.image_size, args.num_classes)
    write_dataset(args.out, scenes)
    n_boxes = sum(len(s.annotations) for s in scenes)
    print(f"wrote {len(scenes)} scenes ({n_boxes} signs) to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = load_config(args.config, **overrides)
    scenes = read_dataset(args.data)
    num_classes = args.num_classes
    if num_classes is None:
        num_classes = 1 + max((a.class_id for s in scenes for a in s.annotations), default=1)
    log, model = train_toy(cfg, scenes, args.epochs, num_classes, batch_size=args.batch_size, base_lr=args.lr)
    save_detector(model, args.out)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".trainlog.json")
    write_json(log_path, log.to_json())
    print(f"initial loss {log.initial_loss:.4f}  final epoch loss {log.final_loss:.4f}")
    print(f"val mAP@0.50 per epoch: {', '.join(f'{v:.4f}' for v in log.val_map50)}")
    print(f"checkpoint -> {args.out}\ntrain log  -> {log_path}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    model = load_detector(args.checkpoint, cfg)
    scenes = read_dataset(args.data)
    dets = infer(model, scenes, batch_size=args.batch_size, score_thresh=args.score_thresh)
    write_json(args.out, detections_to_json(dets))
    print(f"wrote {len(dets)} detections for {len(scenes)} scenes to {args.out}")
    return 0


def cmd_eval(args) -> int:
    dets = detections_from_json(read_json(args.detections))
    gts = ground_truth_from_json(read_json(args.ground_truth))
    if args.data:
        image_ids = [p.stem for p in sorted((Path(args.data) / "scenes").glob("*.pytf"))]
    else:
        # scenes without signs only show up through their detections
        image_ids = sorted({g.image_id for g in gts} | {d.image_id for d in dets})
    report = evaluate(dets, gts, image_ids=image_ids)
    print(report.table())
    if args.out:
        write_json(args.out, report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    results = run_gradient_suite(seed=args.seed)
    failed = 0
    for r in results:
        status = "ok  " if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status} {r.name:<26} max rel err {r.error:.3e}  ({r.seconds:.2f}s)")
    print(f"{len(results) - failed}/{len(results)} passed (tolerance {TOLERANCE:g}) in {time.perf_counter() - start:.1f}s")
    return 1 if failed else 0


def cmd_shapes(args) -> int:
    cfg = load_config(args.config)
    size = args.size or cfg.image_size[0]
    model = build_backbone(cfg)
    image = np.zeros((1, cfg.input_channels, size, size), dtype=np.float32)
    with no_grad():
        pyramid = forward_pyramid(model, image, "eval")
    print(f"input {cfg.input_channels}x{size}x{size}")
    print(f"{'level':<6} {'stride':>6} {'channels':>9} {'height':>7} {'width':>6}")
    for i, (f, stride) in enumerate(zip(pyramid.features, cfg.strides), start=1):
        _, c, h, w = f.shape
        print(f"F{i:<5} {stride:>6} {c:>9} {h:>7} {w:>6}")
    if pyramid.class_token_out is not None:
        print(f"class token: {list(pyramid.class_token_out.shape)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyramid-transformer", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-scenes", type=int, default=200)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--num-classes", type=int, default=4)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train backbone + toy head")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="TrainLog JSON path (default: <out>.trainlog.json)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--batch-size", type=int, default=BATCH_SIZE)
    p.add_argument("--lr", type=float, default=1e-4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a trained detector over a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=BATCH_SIZE)
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--data", help="dataset dir; its scenes define the image id space (default: ids seen in either file)")
    p.add_argument("--out", help="EvalReport JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the double-precision gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("shapes", help="print the feature-pyramid shape table")
    p.add_argument("--config", required=True)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_shapes)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
