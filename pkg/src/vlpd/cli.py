"""Command-line surface: synth, pseudolabel, train, eval, detect, plot."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import RunConfig
from .data import load_dataset, load_image, make_synthetic_dataset, write_detections
from .evaluation import SUBSETS, read_report
from .pipeline import (
    detect,
    evaluate_checkpoint,
    generate_dataset_pseudo_labels,
    load_checkpoint,
    train,
    write_eval_outputs,
)


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.from_yaml(path) if path else RunConfig()


def _cmd_synth(args) -> int:
    root = make_synthetic_dataset(
        args.seed, args.n, (args.height, args.width), args.out
    )
    print(f"wrote {args.n} images to {root}")
    return 0


def _cmd_pseudolabel(args) -> int:
    cfg = _load_config(args.config)
    records = load_dataset(args.dataset)
    paths = generate_dataset_pseudo_labels(records, cfg, args.out)
    print(f"cached {len(paths)} pseudo-label maps in {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = RunConfig.from_yaml(args.config)
    result = train(cfg)
    print(
        f"trained {len(result.log_rows)} iterations: combined "
        f"{result.initial_combined:.6g} -> {result.final_combined:.6g}"
    )
    if result.checkpoint_dir is not None:
        print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def _cmd_eval(args) -> int:
    report, dets = evaluate_checkpoint(
        args.checkpoint, args.dataset, args.subsets, args.threshold, skip_undefined=True
    )
    outputs = write_eval_outputs(report, dets, args.out, figure=not args.no_figure)
    for name in args.subsets:
        if name in report.results:
            res = report.results[name]
            print(f"{name}: MR-2 {100.0 * res.mr2:.2f}% ({res.num_gt} gt boxes)")
        else:
            print(f"{name}: undefined (no ground truth in subset)")
    for path in outputs:
        print(f"wrote {path}")
    return 0


def _cmd_detect(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    boxes = detect(model, image, cfg, args.threshold)
    image_id = Path(args.image).stem
    if args.out:
        write_detections({image_id: boxes}, args.out)
        print(f"wrote {len(boxes)} detections to {args.out}")
    else:
        for b in boxes:
            print(f"{image_id} {b.x:.6f} {b.y:.6f} {b.w:.6f} {b.h:.6f} {b.score:.6f}")
    return 0


def _cmd_plot(args) -> int:
    from .plotting import plot_report

    report = read_report(args.report)
    plot_report(report, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlpd",
        description="Context-aware pedestrian detection with vision-language "
        "self-supervision: synthetic data, training, inference, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("seed", type=int)
    p.add_argument("n", type=int, help="number of images")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=128)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("pseudolabel", help="cache pseudo-label score maps")
    p.add_argument("dataset")
    p.add_argument("out", help="cache directory for .vls files")
    p.add_argument("--config", help="YAML config (defaults used when omitted)")
    p.set_defaults(func=_cmd_pseudolabel)

    p = sub.add_parser("train", help="train from a YAML config")
    p.add_argument("config")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument(
        "--subsets", nargs="+", default=["Reasonable"], choices=sorted(SUBSETS)
    )
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", default="vlpd_eval", help="output prefix for report files")
    p.add_argument("--no-figure", action="store_true", help="skip the curve figure")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("detect", help="detect pedestrians in one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", help="detection file (stdout when omitted)")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("plot", help="render curves from an eval report")
    p.add_argument("report", help=".tsv report written by eval")
    p.add_argument("out", help="output .png path")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
