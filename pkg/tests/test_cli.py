import json
import os
import subprocess
import sys

import pytest

from segtraffic.cli import main
from segtraffic.imageio import SceneConfig, SceneObject, write_jsonl


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_no_arguments_is_usage_error(capsys):
    code, out, err = run_cli(capsys)
    assert code == 2 and out == "" and "usage:" in err


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run_cli(capsys, "eval", "--pred", "a", "--gt", "b", "--bogus")
    assert code == 2 and "usage:" in err


def test_eval_identical_files(tmp_path, capsys):
    gt = [{"frame": 1, "class_id": 2, "bbox": [1, 2, 3, 4]}, {"frame": 2, "class_id": 0, "bbox": [5, 5, 9, 9]}]
    write_jsonl(tmp_path / "gt.jsonl", gt)
    write_jsonl(tmp_path / "pred.jsonl", [dict(r, score=1.0) for r in gt])
    code, out, _ = run_cli(capsys, "eval", "--pred", str(tmp_path / "pred.jsonl"), "--gt",
                           str(tmp_path / "gt.jsonl"), "--pr-csv", str(tmp_path / "pr.csv"))
    assert code == 0 and '"map":1.0' in out
    assert (tmp_path / "pr.csv").exists()


def test_runtime_errors_exit_one(tmp_path, capsys):
    code, out, err = run_cli(capsys, "eval", "--pred", str(tmp_path / "nope"), "--gt", str(tmp_path / "nope"))
    assert code == 1 and out == "" and "error" in err
    (tmp_path / "c.json").write_text('{"not.a.key": 1}')
    code, _, err = run_cli(capsys, "run", "--frames", str(tmp_path), "--config", str(tmp_path / "c.json"),
                           "--out", str(tmp_path / "o"))
    assert code == 1 and "not.a.key" in err


def test_synth_run_train_eval_chain(tmp_path, capsys):
    scene = SceneConfig(width=48, height=48, num_frames=24, noise=3, objects=[
        SceneObject(1, 1, 10, 16, 16, vx=1.0, intensity=220, start=8),
    ])
    (tmp_path / "scene.json").write_text(json.dumps(scene.to_dict()))
    code, out, _ = run_cli(capsys, "synth", "--config", str(tmp_path / "scene.json"),
                           "--out", str(tmp_path / "data"), "--seed", "1")
    assert code == 0 and json.loads(out)["frames"] == 24

    (tmp_path / "train.json").write_text(json.dumps({"det.epochs": 3, "bg.alpha": 6}))
    code, out, _ = run_cli(capsys, "train", "--frames", str(tmp_path / "data/frames"), "--gt",
                           str(tmp_path / "data/gt.jsonl"), "--config", str(tmp_path / "train.json"),
                           "--out-model", str(tmp_path / "model.tdet"))
    assert code == 0 and json.loads(out)["epochs"] == 3

    (tmp_path / "run.json").write_text(json.dumps(
        {"det.model": "model.tdet", "det.confidence": 0.0, "bg.alpha": 6, "tan.max_passes": 10}))
    code, out, _ = run_cli(capsys, "run", "--frames", str(tmp_path / "data/frames"), "--config",
                           str(tmp_path / "run.json"), "--out", str(tmp_path / "out"), "--seed", "2")
    summary = json.loads(out)
    assert code == 0 and summary["seed"] == 2 and summary["detections"] > 0

    code, out, _ = run_cli(capsys, "eval", "--pred", str(tmp_path / "out/detections.jsonl"),
                           "--gt", str(tmp_path / "data/gt.jsonl"), "--iou", "0.5")
    report = json.loads(out)
    assert code == 0 and 0.0 <= report["map"] <= 1.0 and "1" in report["per_class"]


def test_module_entry_point_and_log_env(tmp_path):
    env = dict(os.environ, SEGTRAFFIC_LOG="debug")
    proc = subprocess.run([sys.executable, "-m", "segtraffic"], capture_output=True, text=True, env=env)
    assert proc.returncode == 2 and "usage:" in proc.stderr


@pytest.mark.parametrize("level", ["error", "info", "debug"])
def test_log_levels_accepted(level, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SEGTRAFFIC_LOG", level)
    code, _, _ = run_cli(capsys, "eval", "--pred", str(tmp_path / "x"), "--gt", str(tmp_path / "x"))
    assert code == 1
