"""Four-stage segmentation over a frame directory, and detector training.

Stages per frame: background update and foreground mask, mask-driven
proposals, detection, then an active-net mesh refined over every
detection.  Frame 1 only initialises the background model.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activenet import ExternalField, init_mesh, mesh_energy, mesh_rows_cols, segment
from .background import extract_foreground, init_model, update_model
from .boxes import Detection, RoiBox
from .config import PipelineConfig
from .detect import TinyDetector, conv_forward, detect_objects, propose_from_mask
from .detect.training import (
    TrainingImage,
    jittered,
    label_roi,
    random_background_boxes,
    train,
)
from .imageio import FRAME_PATTERN, Frame, ImageFormatError, frame_index, list_frame_files, load_frame, read_jsonl, save_frame

log = logging.getLogger(__name__)

STAGES = ("read", "background", "proposals", "detection", "mesh", "write")


class PipelineError(RuntimeError):
    pass


@dataclass
class FrameResult:
    index: int
    mask: Frame
    detections: list[Detection]
    meshes: list = field(default_factory=list)
    energies: list[float] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


def _frame_files(frames_dir) -> list[Path]:
    try:
        files = list_frame_files(frames_dir)
    except FileNotFoundError as exc:
        raise PipelineError(str(exc)) from exc
    if not files:
        raise PipelineError(f"no frame files (frame_NNNNNN.pgm) in {frames_dir}")
    return files


def _load(path) -> Frame:
    try:
        return load_frame(path)
    except (OSError, ImageFormatError) as exc:
        raise PipelineError(f"cannot read frame {Path(path).name}: {exc}") from exc


def load_detector(config: PipelineConfig, seed: int) -> TinyDetector:
    path = config.model_path()
    if path is None:
        log.warning("det.model not set; using an untrained detector")
        return TinyDetector.init(seed, lam=config["det.lambda"], scale=config["det.init_scale"])
    return TinyDetector.load(path)


def mesh_seed(seed: int, frame: int, k: int) -> int:
    return (seed * 1_000_003 + frame * 1_009 + k) % (2**63)


def iter_frames(files, config: PipelineConfig, detector: TinyDetector, seed: int):
    """Yield a :class:`FrameResult` for every frame after the first, in index order."""
    gp = config.gain_params()
    ep = config.energy_params()
    warmup = config["bg.alpha"]
    tau = config["bg.tau"]
    model = None
    shape = None
    carry = 0.0  # initialisation time, booked on the first emitted frame
    for path in files:
        t0 = time.perf_counter()
        frame = _load(path)
        j = frame_index(path)
        if model is None:
            model = init_model(frame, gp)
            shape = frame.shape
            carry = time.perf_counter() - t0
            continue
        if frame.shape != shape:
            raise PipelineError(f"frame {path.name} has size {frame.shape}, expected {shape}")
        timings = {}
        t1 = time.perf_counter()
        timings["read"] = t1 - t0 + carry
        carry = 0.0
        update_model(model, frame)
        mask = extract_foreground(model, frame, tau)
        t2 = time.perf_counter()
        timings["background"] = t2 - t1
        proposals = propose_from_mask(mask, config["det.min_area"])
        t3 = time.perf_counter()
        timings["proposals"] = t3 - t2
        if j <= warmup or not proposals:
            dets = []
        else:
            fmap = conv_forward(detector, frame)
            dets = detect_objects(detector, frame, proposals, config["det.confidence"], fmap=fmap)
        t4 = time.perf_counter()
        timings["detection"] = t4 - t3
        meshes, energies = [], []
        if dets:
            fld = ExternalField.build(frame, mask, ep)
            for k, det in enumerate(dets):
                rows, cols = mesh_rows_cols(
                    det.box, config["tan.node_spacing"], config["tan.min_nodes"], config["tan.max_nodes"]
                )
                mesh = init_mesh(rows, cols, det.box)
                mesh = segment(mesh, frame, mask, ep, seed=mesh_seed(seed, j, k))
                meshes.append(mesh)
                energies.append(mesh_energy(mesh, None, None, ep, field=fld))
        timings["mesh"] = time.perf_counter() - t4
        yield FrameResult(j, mask, dets, meshes, energies, timings)


def run_pipeline(frames_dir, config: PipelineConfig, out_dir, seed: int | None = None) -> dict:
    """Run all stages over ``frames_dir`` and write artifacts under ``out_dir``.

    Writes ``masks/frame_%06d.pgm``, ``detections.jsonl``,
    ``meshes/frame_%06d.json`` and ``summary.json``; returns the summary.
    """
    seed = config["seed"] if seed is None else int(seed)
    files = _frame_files(frames_dir)
    if len(files) < 2:
        raise PipelineError("need at least two frames (the first only initialises the background)")
    detector = load_detector(config, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config["out.masks"]:
        (out_dir / "masks").mkdir(exist_ok=True)
    if config["out.meshes"]:
        (out_dir / "meshes").mkdir(exist_ok=True)

    totals = dict.fromkeys(STAGES, 0.0)
    per_frame = []
    n_det = 0
    det_path = out_dir / "detections.jsonl"
    start = time.perf_counter()
    with open(det_path, "w", encoding="utf-8") as det_fh:
        results = iter_frames(files, config, detector, seed)
        while True:
            try:
                res = next(results)
            except StopIteration:
                break
            t0 = time.perf_counter()
            if config["out.masks"]:
                save_frame(out_dir / "masks" / (FRAME_PATTERN % res.index), res.mask)
            if config["out.detections"]:
                for det in res.detections:
                    det_fh.write(json.dumps(det.to_record(res.index), separators=(",", ":")) + "\n")
            if config["out.meshes"]:
                payload = {
                    "frame": res.index,
                    "meshes": [
                        {"detection": det.to_record(res.index), "energy": e, "mesh": m.to_dict()}
                        for det, m, e in zip(res.detections, res.meshes, res.energies)
                    ],
                }
                path = out_dir / "meshes" / (FRAME_PATTERN % res.index).replace(".pgm", ".json")
                path.write_text(json.dumps(payload, separators=(",", ":")), encoding="utf-8")
            res.timings["write"] = time.perf_counter() - t0
            for k, v in res.timings.items():
                totals[k] += v
            n_det += len(res.detections)
            per_frame.append({"frame": res.index, "detections": len(res.detections),
                              "foreground_pixels": int((res.mask.data > 0).sum())})
    loop = time.perf_counter() - start

    summary = {
        "frames": len(files),
        "processed": len(per_frame),
        "warmup_frames": int(config["bg.alpha"]),
        "detections": n_det,
        "seed": seed,
        "per_frame": per_frame,
        "timings_ms": {k: round(v * 1000.0, 3) for k, v in totals.items()},
        "loop_ms": round(loop * 1000.0, 3),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return summary


# --- training ---------------------------------------------------------------


def _load_truth(gt_file):
    def check(rec):
        for key in ("frame", "class_id", "bbox"):
            if key not in rec:
                raise ValueError(f"missing key {key!r}")

    by_frame: dict[int, list] = {}
    for rec in read_jsonl(gt_file, check):
        by_frame.setdefault(int(rec["frame"]), []).append((int(rec["class_id"]), RoiBox.from_seq(rec["bbox"])))
    return by_frame


def build_training_corpus(frames_dir, gt_file, config: PipelineConfig, seed: int) -> list[TrainingImage]:
    """Labelled RoIs per frame: ground truth, jittered ground truth, mask proposals and background boxes."""
    files = _frame_files(frames_dir)
    truth = _load_truth(gt_file)
    if not truth:
        raise PipelineError(f"{gt_file}: no ground-truth records")
    rng = np.random.default_rng([seed, 7])
    gp = config.gain_params()
    model = None
    corpus = []
    for path in files:
        frame = _load(path)
        j = frame_index(path)
        gts = truth.get(j, [])
        boxes = []
        if model is None:
            model = init_model(frame, gp)
        else:
            update_model(model, frame)
            if j > config["bg.alpha"]:
                mask = extract_foreground(model, frame, config["bg.tau"])
                boxes += propose_from_mask(mask, config["det.min_area"])
        for _, gt in gts:
            boxes += [gt, jittered(rng, gt, frame.shape)]
        boxes += random_background_boxes(rng, frame.shape, gts, config["det.background_rois"])
        rois = [label_roi(b, gts, config["det.train_iou"]) for b in boxes]
        if rois:
            corpus.append(TrainingImage(frame.data, rois))
    return corpus


def train_detector(frames_dir, gt_file, config: PipelineConfig, out_model, seed: int | None = None) -> dict:
    """Train a detector on labelled RoIs; writes the model blob and ``<model>.loss.csv``."""
    seed = config["seed"] if seed is None else int(seed)
    corpus = build_training_corpus(frames_dir, gt_file, config, seed)
    positives = sum(1 for img in corpus for r in img.rois if r.target is not None)
    if positives == 0:
        raise PipelineError(
            "no positive RoIs: check that the ground truth matches the frames, "
            "or lower det.min_area / det.train_iou"
        )
    detector = TinyDetector.init(seed, lam=config["det.lambda"], scale=config["det.init_scale"])
    history = train(
        detector,
        corpus,
        config["det.epochs"],
        images_per_batch=config["det.images_per_batch"],
        rois_per_image=config["det.rois_per_image"],
        batches_per_epoch=config["det.batches_per_epoch"],
        lr=config["det.lr"],
        momentum=config["det.momentum"],
        seed=seed,
    )
    out_model = Path(out_model)
    out_model.parent.mkdir(parents=True, exist_ok=True)
    detector.save(out_model)
    csv_path = out_model.with_name(out_model.name + ".loss.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(history, 1):
            writer.writerow([epoch, repr(loss)])
    return {
        "model": str(out_model),
        "loss_csv": str(csv_path),
        "epochs": len(history),
        "images": len(corpus),
        "rois": sum(len(img.rois) for img in corpus),
        "positive_rois": positives,
        "initial_loss": history[0] if history else None,
        "final_loss": history[-1] if history else None,
        "losses": history,
    }
