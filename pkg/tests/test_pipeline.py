import json

import numpy as np
import pytest

from segtraffic.activenet import ActiveNetMesh
from segtraffic.config import DEFAULTS, ConfigError, PipelineConfig
from segtraffic.detect import TinyDetector
from segtraffic.imageio import (
    Frame,
    SceneConfig,
    SceneObject,
    gen_synthetic_sequence,
    load_frame,
    save_frame,
    write_sequence,
)
from segtraffic.pipeline import STAGES, PipelineError, build_training_corpus, run_pipeline, train_detector


def small_scene(num_frames=30, objects=True):
    objs = [
        SceneObject(1, 2, 4, 16, 16, vx=2.0, intensity=210, start=12, end=None),
        SceneObject(0, 40, 44, 8, 8, vx=-1.0, intensity=180, start=14, end=None),
    ] if objects else []
    return SceneConfig(width=64, height=64, num_frames=num_frames, background=40, noise=4, objects=objs)


@pytest.fixture(scope="module")
def moving(tmp_path_factory):
    root = tmp_path_factory.mktemp("moving")
    frames, truth = gen_synthetic_sequence(small_scene(), 3)
    write_sequence(root, frames, truth)
    return root


FAST = {"bg.alpha": 10.0, "det.confidence": 0.0, "tan.max_passes": 20}


def strip_timings(summary):
    return {k: v for k, v in summary.items() if k not in ("timings_ms", "loop_ms")}


def test_static_scene_no_detections(tmp_path):
    frames, truth = gen_synthetic_sequence(small_scene(40, objects=False), 0)
    write_sequence(tmp_path / "s", frames, truth)
    summary = run_pipeline(tmp_path / "s/frames", PipelineConfig(FAST), tmp_path / "out")
    assert summary["detections"] == 0 and summary["processed"] == 39
    assert (tmp_path / "out/detections.jsonl").read_text() == ""


def test_outputs_consistent_and_deterministic(moving, tmp_path):
    cfg = PipelineConfig(FAST)
    a = run_pipeline(moving / "frames", cfg, tmp_path / "a", seed=5)
    b = run_pipeline(moving / "frames", cfg, tmp_path / "b", seed=5)
    assert a["detections"] > 0
    for name in ("detections.jsonl", "masks/frame_000020.pgm", "meshes/frame_000020.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    sa = json.loads((tmp_path / "a/summary.json").read_text())
    sb = json.loads((tmp_path / "b/summary.json").read_text())
    assert strip_timings(sa) == strip_timings(sb)

    dets = [json.loads(line) for line in (tmp_path / "a/detections.jsonl").read_text().splitlines()]
    assert all(d["frame"] > 10 for d in dets)  # warmup suppresses detections
    for j in range(2, 31):
        mesh_file = json.loads((tmp_path / f"a/meshes/frame_{j:06d}.json").read_text())
        per_frame = [d for d in dets if d["frame"] == j]
        assert [m["detection"] for m in mesh_file["meshes"]] == per_frame
        for m in mesh_file["meshes"]:
            ActiveNetMesh.from_dict(m["mesh"])
        mask = load_frame(tmp_path / f"a/masks/frame_{j:06d}.pgm")
        assert set(np.unique(mask.data)) <= {0, 255}
    assert [p["frame"] for p in a["per_frame"]] == list(range(2, 31))


def test_timings_sum_to_loop(moving, tmp_path):
    s = run_pipeline(moving / "frames", PipelineConfig(FAST), tmp_path / "o")
    assert set(s["timings_ms"]) == set(STAGES)
    assert all(v >= 0 for v in s["timings_ms"].values())
    total = sum(s["timings_ms"].values())
    assert abs(total - s["loop_ms"]) <= 0.05 * s["loop_ms"]


def test_pipeline_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(PipelineError):
        run_pipeline(tmp_path / "empty", PipelineConfig(), tmp_path / "o")
    with pytest.raises(PipelineError):
        run_pipeline(tmp_path / "missing", PipelineConfig(), tmp_path / "o")
    d = tmp_path / "bad"
    d.mkdir()
    save_frame(d / "frame_000001.pgm", Frame.from_array(np.zeros((16, 16), np.uint8)))
    (d / "frame_000002.pgm").write_bytes(b"P5\n16 16\n255\n\x00")
    with pytest.raises(PipelineError, match="frame_000002.pgm"):
        run_pipeline(d, PipelineConfig(), tmp_path / "o")
    save_frame(d / "frame_000002.pgm", Frame.from_array(np.zeros((8, 16), np.uint8)))
    with pytest.raises(PipelineError, match="size"):
        run_pipeline(d, PipelineConfig(), tmp_path / "o")


def test_config_defaults_and_validation(tmp_path):
    cfg = PipelineConfig()
    assert dict(cfg) == DEFAULTS
    assert cfg.gain_params().alpha == 20 and cfg.energy_params().cut_thresholds == (0.5, 1.0, 2.0)
    for bad in ({"bg.sigmaa": 1}, {"bg.sigma": "x"}, {"det.epochs": 1.5}, {"bg.tau": 0},
                {"tan.cut_thresholds": [2, 1]}, {"out.masks": 1}, {"bg.beta": -1}):
        with pytest.raises(ConfigError):
            PipelineConfig(bad)
    (tmp_path / "c.json").write_text('{"det.model": "models/m.tdet", "bg.sigma": 3}')
    cfg = PipelineConfig.load(tmp_path / "c.json")
    assert cfg["bg.sigma"] == 3.0
    assert cfg.model_path() == tmp_path / "models/m.tdet"
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "bad.json")


def test_zero_epochs_is_initialisation(moving, tmp_path):
    cfg = PipelineConfig({"det.epochs": 0, "bg.alpha": 10.0, "seed": 4})
    log = train_detector(moving / "frames", moving / "gt.jsonl", cfg, tmp_path / "m.tdet")
    assert log["epochs"] == 0
    saved = TinyDetector.load(tmp_path / "m.tdet")
    init = TinyDetector.init(4)
    for k, v in init.params.items():
        np.testing.assert_array_equal(saved.params[k], v)
    assert (tmp_path / "m.tdet.loss.csv").read_text().splitlines() == ["epoch,loss"]


def test_loss_csv_has_one_row_per_epoch(moving, tmp_path):
    cfg = PipelineConfig({"det.epochs": 7, "bg.alpha": 10.0})
    log = train_detector(moving / "frames", moving / "gt.jsonl", cfg, tmp_path / "m.tdet")
    rows = (tmp_path / "m.tdet.loss.csv").read_text().splitlines()
    assert len(rows) == 1 + 7 and rows[1].startswith("1,")
    assert [float(r.split(",")[1]) for r in rows[1:]] == log["losses"]
    # the trained model plugs straight into the pipeline
    run = PipelineConfig({"det.model": str(tmp_path / "m.tdet"), **FAST})
    assert run_pipeline(moving / "frames", run, tmp_path / "o")["processed"] == 29


def test_training_corpus_labels(moving):
    corpus = build_training_corpus(moving / "frames", moving / "gt.jsonl", PipelineConfig({"bg.alpha": 10.0}), 0)
    labels = {r.label for img in corpus for r in img.rois}
    assert {0, 1, 6} <= labels
    for img in corpus:
        for r in img.rois:
            assert (r.target is None) == (r.label == 6)


def test_no_positive_rois_error(moving, tmp_path):
    gt = tmp_path / "gt.jsonl"
    gt.write_text('{"frame": 500, "class_id": 0, "bbox": [0, 0, 4, 4]}\n')
    with pytest.raises(PipelineError, match="min_area"):
        train_detector(moving / "frames", gt, PipelineConfig({"det.epochs": 1}), tmp_path / "m.tdet")
