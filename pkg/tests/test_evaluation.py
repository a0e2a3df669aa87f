import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_by_hand, greedy_match_enumerated, pixel_iou
from segtraffic.evaluation import (
    average_precision,
    evaluate,
    evaluate_records,
    iou,
    match_detections,
    pr_curve,
)
from segtraffic.imageio import write_jsonl

# Hand-built fixture.  Class 0 has two ground truths, class 1 three.
#   class 0: TP(0.9) FP(0.8, duplicate on the same gt) TP(0.7)
#     points (1/2, 1) (1/2, 1/2) (1, 2/3) -> AP = 1/2 * 1 + 1/2 * 2/3 = 5/6
#   class 1: FP(0.95), then two TPs tied at 0.6
#     points (0, 0) (2/3, 2/3)            -> AP = 2/3 * 2/3 = 4/9
#   mAP = (5/6 + 4/9) / 2 = 23/36
FIXTURE_GT = [
    {"frame": 1, "class_id": 0, "bbox": [0, 0, 10, 10]},
    {"frame": 2, "class_id": 0, "bbox": [20, 20, 10, 10]},
    {"frame": 1, "class_id": 1, "bbox": [30, 0, 10, 10]},
    {"frame": 3, "class_id": 1, "bbox": [0, 30, 10, 10]},
    {"frame": 3, "class_id": 1, "bbox": [40, 40, 8, 8]},
]
FIXTURE_PRED = [
    {"frame": 1, "class_id": 0, "bbox": [0, 0, 10, 10], "score": 0.9},
    {"frame": 1, "class_id": 0, "bbox": [1, 0, 10, 10], "score": 0.8},
    {"frame": 2, "class_id": 0, "bbox": [20, 20, 10, 10], "score": 0.7},
    {"frame": 1, "class_id": 1, "bbox": [50, 50, 10, 10], "score": 0.95},
    {"frame": 3, "class_id": 1, "bbox": [0, 30, 10, 10], "score": 0.6},
    {"frame": 1, "class_id": 1, "bbox": [30, 0, 10, 10], "score": 0.6},
]
FIXTURE_AP = {0: 5 / 6, 1: 4 / 9}
FIXTURE_MAP = 23 / 36


def test_iou_examples():
    assert iou((3, 4, 5, 6), (3, 4, 5, 6)) == 1.0
    assert iou((0, 0, 5, 5), (5, 0, 5, 5)) == 0.0
    assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3, abs=1e-15)
    assert pixel_iou((0, 0, 10, 10), (5, 0, 10, 10)) == 50 / 150


box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12))


@settings(max_examples=200, deadline=None)
@given(box, box)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert v == pytest.approx(pixel_iou(a, b), abs=1e-12)
    assert (v == 1.0) == (a == b)
    aa, ab = a[2] * a[3], b[2] * b[3]
    assert v <= min(aa, ab) / max(aa, ab) + 1e-12


def test_match_examples():
    gt = [[0, 0, 10, 10]]
    assert match_detections([{"bbox": [0, 0, 10, 10], "score": 0.5}], gt) == ([True], 0)
    dets = [{"bbox": [0, 0, 10, 10], "score": 0.4}, {"bbox": [1, 0, 10, 10], "score": 0.6}]
    assert match_detections(dets, gt) == ([False, True], 0)
    assert match_detections([], gt) == ([], 1)
    with pytest.raises(ValueError):
        match_detections([], gt, 0.0)


def test_match_score_ties_prefer_larger_box():
    gt = [[0, 0, 10, 10]]
    dets = [{"bbox": [0, 0, 9, 9], "score": 0.5}, {"bbox": [0, 0, 10, 11], "score": 0.5}]
    assert match_detections(dets, gt) == ([False, True], 0)


def test_match_against_enumeration_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        gts = [[int(v) for v in rng.integers(0, 8, 2)] + [int(v) for v in rng.integers(3, 8, 2)]
               for _ in range(rng.integers(0, 3))]
        dets = [{"bbox": [int(v) for v in rng.integers(0, 8, 2)] + [int(v) for v in rng.integers(3, 8, 2)],
                 "score": float(rng.integers(0, 4)) / 4} for _ in range(rng.integers(0, 4))]
        iou_min = float(rng.choice([0.1, 0.3, 0.5]))
        assert match_detections(dets, gts, iou_min) == greedy_match_enumerated(dets, gts, iou_min, iou)


def test_ap_examples():
    assert average_precision([(0.5, True)], 1) == 1.0
    assert average_precision([(0.9, False), (0.8, True)], 1) == 0.5
    assert average_precision([(0.9, True), (0.8, False)], 1) == 1.0
    assert average_precision([], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision([(0.5, True)], 0)


def test_crafted_fixture(tmp_path):
    write_jsonl(tmp_path / "gt.jsonl", FIXTURE_GT)
    write_jsonl(tmp_path / "pred.jsonl", FIXTURE_PRED)
    report = evaluate(tmp_path / "pred.jsonl", tmp_path / "gt.jsonl", 0.5)
    assert set(report.per_class) == {0, 1}
    for c, ap in FIXTURE_AP.items():
        assert report.per_class[c].ap == pytest.approx(ap, abs=1e-15)
    assert report.map == pytest.approx(FIXTURE_MAP, abs=1e-15)
    pr0 = [(p.recall, p.precision, p.tp, p.fp, p.fn) for p in report.per_class[0].pr]
    assert pr0 == [(0.5, 1.0, 1, 0, 1), (0.5, 0.5, 1, 1, 1), (1.0, 2 / 3, 2, 1, 0)]
    pr1 = [(p.recall, p.precision, p.tp, p.fp, p.fn) for p in report.per_class[1].pr]
    assert pr1 == [(0.0, 0.0, 0, 1, 3), (2 / 3, 2 / 3, 2, 1, 1)]
    d = json.loads(json.dumps(report.to_dict()))
    assert d["map"] == report.map and set(d["per_class"]) == {"0", "1"}


def test_classes_without_gt_excluded():
    preds = FIXTURE_PRED + [{"frame": 1, "class_id": 4, "bbox": [0, 0, 5, 5], "score": 0.99}]
    assert evaluate_records(preds, FIXTURE_GT).map == pytest.approx(FIXTURE_MAP, abs=1e-15)


def test_identity_and_empty(tmp_path):
    gt = [{"frame": j, "class_id": j % 2, "bbox": [j, j, 8, 8]} for j in range(1, 9)]
    assert evaluate_records([dict(r, score=1.0) for r in gt], gt).map == 1.0
    assert evaluate_records([], gt).map == 0.0


def test_pr_csv(tmp_path):
    report = evaluate_records(FIXTURE_PRED, FIXTURE_GT)
    report.write_pr_csv(tmp_path / "pr.csv")
    lines = (tmp_path / "pr.csv").read_text().splitlines()
    assert lines[0] == "class_id,score,recall,precision,tp,fp,fn"
    assert len(lines) == 1 + 3 + 2


def test_parse_errors_name_line(tmp_path):
    write_jsonl(tmp_path / "gt.jsonl", FIXTURE_GT)
    bad = tmp_path / "pred.jsonl"
    bad.write_text(json.dumps(FIXTURE_PRED[0]) + "\n" + '{"frame": 1, "class_id": 0, "bbox": [0,0,1,1]}\n')
    with pytest.raises(ValueError, match=r"pred.jsonl:2: missing key 'score'"):
        evaluate(bad, tmp_path / "gt.jsonl")


def random_labels(rng, n):
    scores = rng.choice(np.arange(1, 40) / 40.0, size=n)
    return [(float(s), bool(t)) for s, t in zip(scores, rng.random(n) < 0.5)]


def test_ap_matches_hand_sweep():
    rng = np.random.default_rng(1)
    for _ in range(200):
        labels = random_labels(rng, int(rng.integers(1, 12)))
        # distinct scores only, so the hand sweep can go item by item
        labels = list({s: (s, t) for s, t in labels}.values())
        num_gt = sum(t for _, t in labels) + int(rng.integers(0, 3)) or 1
        ordered = [t for _, t in sorted(labels, key=lambda st_: -st_[0])]
        assert average_precision(labels, num_gt) == pytest.approx(ap_by_hand(ordered, num_gt), abs=1e-12)


def test_ap_monotone_transform_invariance():
    rng = np.random.default_rng(2)
    transforms = [np.exp, lambda s: s**3, lambda s: np.log(s) * 7 - 2, lambda s: 1 / (1 + np.exp(-10 * s))]
    for k in range(100):
        labels = random_labels(rng, int(rng.integers(1, 15)))
        num_gt = max(1, sum(t for _, t in labels))
        f = transforms[k % len(transforms)]
        moved = [(float(f(s)), t) for s, t in labels]
        assert average_precision(moved, num_gt) == average_precision(labels, num_gt)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.booleans()), min_size=1, max_size=12), st.integers(0, 3))
def test_ap_invariants(items, extra_gt):
    labels = [(s / 20, t) for s, t in items]
    num_gt = sum(t for _, t in labels) + extra_gt or 1
    ap = average_precision(labels, num_gt)
    assert 0.0 <= ap <= 1.0
    worse = labels + [(0.0, False)]
    assert average_precision(worse, num_gt) <= ap + 1e-12
    for p in pr_curve(labels, num_gt):
        assert p.tp + p.fn == num_gt
        assert 0 <= p.recall <= 1 and 0 <= p.precision <= 1
    more = labels + [(0.0, True)]
    if sum(t for _, t in more) <= num_gt:
        assert pr_curve(more, num_gt)[-1].recall >= pr_curve(labels, num_gt)[-1].recall
