"""Flat dotted-key configuration shared by the pipeline and the CLI.

Config files are JSON objects such as ``{"bg.sigma": 3.0, "det.epochs": 100}``.
Missing keys take the defaults below; unknown keys are rejected.
"""

from __future__ import annotations

import json
from pathlib import Path

from .activenet import EnergyParams
from .background import GainParams

DEFAULTS: dict = {
    # adaptive background model
    "bg.sigma": 4.0,
    "bg.gain": 1.0,
    "bg.alpha": 20.0,  # also the warmup length in frames
    "bg.beta": 5.0,
    "bg.tau": 0.05,
    # active net refinement
    "tan.elasticity": 1.0,
    "tan.rigidity": 0.5,
    "tan.w_internal": 2.0,
    "tan.w_boundary": 2.0,
    "tan.w_distance": 0.5,
    "tan.search_radius": 2,
    "tan.max_passes": 100,
    "tan.cut_thresholds": [0.5, 1.0, 2.0],
    "tan.edge_threshold": 0.5,
    "tan.node_spacing": 4.0,
    "tan.min_nodes": 4,
    "tan.max_nodes": 16,
    # detector
    "det.model": None,
    "det.confidence": 0.5,
    "det.min_area": 16,
    "det.lambda": 1.0,
    "det.lr": 0.01,
    "det.momentum": 0.9,
    "det.epochs": 200,
    "det.images_per_batch": 5,
    "det.rois_per_image": 8,
    "det.batches_per_epoch": 1,
    "det.train_iou": 0.5,
    "det.background_rois": 4,
    "det.init_scale": 0.05,
    # outputs
    "out.masks": True,
    "out.meshes": True,
    "out.detections": True,
    "seed": 0,
}

_INT_KEYS = {
    "tan.search_radius", "tan.max_passes", "tan.min_nodes", "tan.max_nodes", "det.min_area",
    "det.epochs", "det.images_per_batch", "det.rois_per_image", "det.batches_per_epoch",
    "det.background_rois", "seed",
}
_BOOL_KEYS = {"out.masks", "out.meshes", "out.detections"}


class ConfigError(ValueError):
    pass


def _coerce(key, value):
    if key == "det.model":
        if value is not None and not isinstance(value, str):
            raise ConfigError("det.model must be a path string or null")
        return value
    if key == "tan.cut_thresholds":
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError("tan.cut_thresholds must be a non-empty list")
        return [float(v) for v in value]
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number")
    if key in _INT_KEYS:
        if int(value) != value:
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    return float(value)


class PipelineConfig(dict):
    """Validated mapping of every configuration key."""

    def __init__(self, overrides: dict | None = None, base_dir=None):
        super().__init__(DEFAULTS)
        self.base_dir = Path(base_dir) if base_dir is not None else None
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self[key] = _coerce(key, value)
        try:
            self.gain_params()
            self.energy_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 < self["bg.tau"] <= 1.0:
            raise ConfigError("bg.tau must lie in (0, 1]")
        if not 0.0 <= self["det.confidence"] <= 1.0:
            raise ConfigError("det.confidence must lie in [0, 1]")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls(data, base_dir=path.parent)

    def gain_params(self) -> GainParams:
        return GainParams(
            gain=self["bg.gain"], alpha=self["bg.alpha"], beta=self["bg.beta"], sigma=self["bg.sigma"]
        )

    def energy_params(self) -> EnergyParams:
        return EnergyParams(
            elasticity=self["tan.elasticity"],
            rigidity=self["tan.rigidity"],
            w_internal=self["tan.w_internal"],
            w_boundary=self["tan.w_boundary"],
            w_distance=self["tan.w_distance"],
            search_radius=self["tan.search_radius"],
            max_passes=self["tan.max_passes"],
            cut_thresholds=tuple(self["tan.cut_thresholds"]),
            edge_threshold=self["tan.edge_threshold"],
        )

    def model_path(self) -> Path | None:
        """``det.model`` resolved against the config file's directory."""
        model = self["det.model"]
        if model is None:
            return None
        p = Path(model)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p
