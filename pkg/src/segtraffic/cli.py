"""Command line entry point: ``segtraffic {run,train,eval,synth}``.

Results are printed to stdout as one JSON object.  Exit status is 0 on
success, 1 on runtime errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig
from .evaluation import evaluate
from .imageio import SceneConfig, gen_synthetic_sequence, write_sequence
from .pipeline import run_pipeline, train_detector

log = logging.getLogger("segtraffic")


def _setup_logging():
    level = os.environ.get("SEGTRAFFIC_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.ERROR),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segtraffic", description="Vehicle segmentation pipeline on grayscale frame sequences."
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="{run,train,eval,synth}")

    p = sub.add_parser("run", help="segment a frame directory")
    p.add_argument("--frames", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train the detector")
    p.add_argument("--frames", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out-model", required=True, type=Path)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--pr-csv", type=Path, default=None, help="also write PR points as CSV")

    p = sub.add_parser("synth", help="render a synthetic scene")
    p.add_argument("--config", required=True, type=Path, help="scene description (JSON)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", required=True, type=int)
    return parser


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, separators=(",", ":")) + "\n")


def _run(args) -> dict:
    config = PipelineConfig.load(args.config)
    summary = run_pipeline(args.frames, config, args.out, seed=args.seed)
    return {k: v for k, v in summary.items() if k != "per_frame"} | {"out": str(args.out)}


def _train(args) -> dict:
    config = PipelineConfig.load(args.config)
    result = train_detector(args.frames, args.gt, config, args.out_model)
    result.pop("losses")
    return result


def _eval(args) -> dict:
    if not 0.0 < args.iou <= 1.0:
        raise ValueError("--iou must lie in (0, 1]")
    report = evaluate(args.pred, args.gt, args.iou)
    if args.pr_csv is not None:
        report.write_pr_csv(args.pr_csv)
    return report.to_dict()


def _synth(args) -> dict:
    try:
        scene = SceneConfig.from_dict(json.loads(args.config.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ValueError(f"{args.config}: invalid scene config ({exc})") from exc
    frames, truth = gen_synthetic_sequence(scene, args.seed)
    frame_dir = write_sequence(args.out, frames, truth)
    return {
        "frames": len(frames),
        "frames_dir": str(frame_dir),
        "gt": str(Path(args.out) / "gt.jsonl"),
        "objects": sum(len(t) for t in truth),
    }


COMMANDS = {"run": _run, "train": _train, "eval": _eval, "synth": _synth}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _emit(COMMANDS[args.command](args))
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"segtraffic {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
