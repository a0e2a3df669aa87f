"""Detection evaluation: IoU matching, precision/recall and (mean) average precision."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .boxes import box_iou
from .imageio import read_jsonl


def iou(a, b) -> float:
    return box_iou(a, b)


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    score: float
    tp: int
    fp: int
    fn: int


@dataclass
class ClassReport:
    ap: float
    num_gt: int
    num_det: int
    pr: list[PRPoint] = field(default_factory=list)


@dataclass
class EvalReport:
    per_class: dict[int, ClassReport]
    map: float

    def to_dict(self) -> dict:
        return {
            "per_class": {
                str(c): {
                    "ap": r.ap,
                    "num_gt": r.num_gt,
                    "num_det": r.num_det,
                    "pr": [vars(p) for p in r.pr],
                }
                for c, r in sorted(self.per_class.items())
            },
            "map": self.map,
        }

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "score", "recall", "precision", "tp", "fp", "fn"])
            for c, r in sorted(self.per_class.items()):
                for p in r.pr:
                    writer.writerow([c, p.score, p.recall, p.precision, p.tp, p.fp, p.fn])


def _area(box) -> float:
    return float(box[2]) * float(box[3])


def detection_order(dets) -> list[int]:
    """Indices of ``dets`` (dicts with ``score``/``bbox``) by score desc, larger area, input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i]["score"], -_area(dets[i]["bbox"]), i))


def match_detections(dets, gts, iou_min: float = 0.5):
    """Greedy matching of same-class detections to ground-truth boxes of one frame.

    ``dets`` are dicts with ``bbox`` and ``score``; ``gts`` are boxes.
    Returns ``(is_tp, fn)``, ``is_tp`` aligned with the input order.
    """
    if not 0.0 < iou_min <= 1.0:
        raise ValueError("iou_min must lie in (0, 1]")
    used = [False] * len(gts)
    is_tp = [False] * len(dets)
    for i in detection_order(dets):
        best, best_iou = -1, iou_min
        for g, gt in enumerate(gts):
            if used[g]:
                continue
            o = box_iou(dets[i]["bbox"], gt)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = g, o
        if best >= 0:
            used[best] = True
            is_tp[i] = True
    return is_tp, used.count(False)


def pr_curve(scored_labels, num_gt: int) -> list[PRPoint]:
    """Precision/recall at every distinct score threshold.

    ``scored_labels`` is a sequence of ``(score, is_tp)``.
    """
    items = sorted(scored_labels, key=lambda sl: -sl[0])
    points = []
    tp = fp = 0
    k = 0
    while k < len(items):
        score = items[k][0]
        while k < len(items) and items[k][0] == score:
            if items[k][1]:
                tp += 1
            else:
                fp += 1
            k += 1
        points.append(PRPoint(tp / num_gt, tp / (tp + fp), float(score), tp, fp, num_gt - tp))
    return points


def average_precision(scored_labels, num_gt: int) -> float:
    """All-points interpolated AP: area under the monotone precision envelope."""
    if num_gt < 1:
        raise ValueError("average precision needs at least one ground truth")
    points = pr_curve(scored_labels, num_gt)
    ap = 0.0
    prev_recall = 0.0
    for k, p in enumerate(points):
        envelope = max(q.precision for q in points[k:])
        ap += (p.recall - prev_recall) * envelope
        prev_recall = p.recall
    return ap


def _validator(need_score):
    keys = ("frame", "class_id", "bbox") + (("score",) if need_score else ())

    def check(rec):
        for key in keys:
            if key not in rec:
                raise ValueError(f"missing key {key!r}")
        if not isinstance(rec["bbox"], list) or len(rec["bbox"]) != 4:
            raise ValueError("bbox must be a list of 4 numbers")
        int(rec["frame"]), int(rec["class_id"])
        if need_score:
            float(rec["score"])

    return check


def evaluate_records(preds, gts, iou_min: float = 0.5) -> EvalReport:
    """Per-class AP over all frames and mAP over classes that have ground truth."""
    gt_by = {}
    for rec in gts:
        gt_by.setdefault(int(rec["class_id"]), {}).setdefault(int(rec["frame"]), []).append(rec["bbox"])
    det_by = {}
    for rec in preds:
        det_by.setdefault(int(rec["class_id"]), {}).setdefault(int(rec["frame"]), []).append(rec)

    per_class = {}
    for cls, frames in gt_by.items():
        num_gt = sum(len(b) for b in frames.values())
        scored = []
        for frame, dets in det_by.get(cls, {}).items():
            is_tp, _ = match_detections(dets, frames.get(frame, []), iou_min)
            scored.extend((float(d["score"]), t) for d, t in zip(dets, is_tp))
        per_class[cls] = ClassReport(
            ap=average_precision(scored, num_gt),
            num_gt=num_gt,
            num_det=len(scored),
            pr=pr_curve(scored, num_gt),
        )
    m = sum(r.ap for r in per_class.values()) / len(per_class) if per_class else 0.0
    return EvalReport(per_class, m)


def evaluate(pred_file, gt_file, iou_min: float = 0.5) -> EvalReport:
    preds = read_jsonl(pred_file, _validator(need_score=True))
    gts = read_jsonl(gt_file, _validator(need_score=False))
    return evaluate_records(preds, gts, iou_min)
