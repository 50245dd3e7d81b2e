"""``pipeline`` command line.

Exit codes: 0 success, 1 configuration error, 2 adapter failure, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .adapter import AdapterError
from .augment import parse_spec
from .dataio import DataError, load_coco, load_results, save_coco, save_results, split_dataset
from .evaluation import EvaluationError, evaluate, write_report
from .fusion import FusionConfig, confidence_filter
from .geometry import PredictionSet
from .pipeline import ConfigError, Pipeline, PipelineError, load_config, refine

EXIT_OK, EXIT_CONFIG, EXIT_ADAPTER, EXIT_DATA = 0, 1, 2, 3


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = Pipeline(cfg, output_dir=args.output_dir).run()
    print(result.report_path)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthdet import generate_dataset

    gt = generate_dataset(args.n, args.seed, args.width, args.height, args.label, with_masks=not args.no_masks)
    out = Path(args.out_dir)
    save_coco(gt, out / "gt.json")
    save_coco(gt.unlabeled(), out / "manifest.json")
    print(out / "gt.json")
    return EXIT_OK


def cmd_split(args) -> int:
    m = load_coco(args.manifest)
    train, held = split_dataset(m, args.train_size, args.seed)
    out = Path(args.out_dir)
    save_coco(train, out / "train.json")
    save_coco(held, out / "eval.json")
    print(f"train={len(train)} eval={len(held)}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    manifest = load_coco(args.manifest)
    views = []
    for item in args.pred:
        token, sep, path = item.partition("=")
        if not sep:
            token, path = "identity", item
        token = parse_spec(token).token
        views.append(load_results(path, manifest, frame=token))
    cfg = FusionConfig(args.iou_threshold, args.score_threshold, args.label_vote, args.algorithm)
    fused = refine(views, cfg, args.score_threshold, args.top1)
    sizes = manifest.sizes
    save_results([PredictionSet(i, *sizes[i], tuple(v)) for i, v in fused.items()], args.out)
    print(args.out)
    return EXIT_OK


def cmd_filter(args) -> int:
    manifest = load_coco(args.manifest)
    preds = load_results(args.pred, manifest)
    kept = [ps.replace(confidence_filter(ps.instances, args.threshold)) for ps in preds.values()]
    save_results(kept, args.out)
    n_in = sum(len(p) for p in preds.values())
    n_out = sum(len(p) for p in kept)
    print(f"kept {n_out}/{n_in} predictions on {sum(1 for p in kept if len(p))}/{len(kept)} images")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = load_coco(args.gt)
    if gt.annotations is None:
        raise DataError(f"{args.gt} has no annotations")
    preds = load_results(args.pred, gt)
    kinds = ["box", "mask"] if args.kind == "both" else [args.kind]
    metrics = {k: evaluate(gt.annotations, {i: p.instances for i, p in preds.items()}, k) for k in kinds}
    path = write_report(metrics, args.report)
    if args.pr_csv:
        for k, r in metrics.items():
            r.write_pr_csv(Path(args.pr_csv).with_name(f"{Path(args.pr_csv).stem}_{k}.csv") if len(kinds) > 1 else args.pr_csv)
    for k, r in metrics.items():
        print(f"{k}: AP={r.ap:.4f} AP50={r.ap50:.4f} AP75={r.ap75:.4f}")
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipeline", description="annotation-free pseudo-labeling pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run all stages from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir", default=None)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="write a synthetic dataset (manifest.json + gt.json)")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--label", default="spacecraft")
    s.add_argument("--no-masks", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="seeded train/eval split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--train-size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("fuse", help="fuse per-view result files (TOKEN=PATH, boxes in that view's frame)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pred", action="append", required=True, metavar="TOKEN=PATH")
    s.add_argument("--out", required=True)
    s.add_argument("--iou-threshold", type=float, default=0.55)
    s.add_argument("--score-threshold", type=float, default=0.0)
    s.add_argument("--label-vote", default="score-weighted", choices=["score-weighted", "majority"])
    s.add_argument("--algorithm", default="wbf", choices=["wbf", "nms", "soft-nms"])
    s.add_argument("--top1", action="store_true")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("filter", help="confidence-threshold a result file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--threshold", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("eval", help="COCO-style AP of a result file against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--kind", default="box", choices=["box", "mask", "both"])
    s.add_argument("--report", required=True)
    s.add_argument("--pr-csv", default=None)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AdapterError as exc:
        print(f"adapter failure: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except (DataError, EvaluationError, PipelineError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
