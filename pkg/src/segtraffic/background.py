"""Adaptive per-pixel background model.

Every pixel keeps a density over the 256 intensity levels.  Each new frame
deposits a Gaussian kernel at the observed intensity, scaled down by a
sigmoid gain schedule so that the model settles as frames accumulate.
Foreground pixels are those whose observed intensity has low density
relative to the pixel's own peak.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imageio import Frame

LEVELS = 256
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class BackgroundModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class GainParams:
    gain: float = 1.0
    alpha: float = 20.0
    beta: float = 5.0
    sigma: float = 4.0

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be > 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


def gain_at(params: GainParams, cont: float) -> float:
    """Learning-rate gain after ``cont`` frames; ``alpha`` is the inflection point.

    The result lies in the open interval ``(0, 2 * gain)``.  Far above
    ``alpha`` the quotient rounds to ``2 * gain``; it is then held at the
    largest double below the bound.
    """
    z = -(cont - params.alpha) / params.beta
    z = min(max(z, -500.0), 500.0)
    top = 2.0 * params.gain
    return min(top / (1.0 + math.exp(z)), math.nextafter(top, 0.0))


def _kernel_table(sigma: float) -> np.ndarray:
    """``table[v, y]`` = unnormalised Gaussian exp(-((y - v)/sigma)^2 / 2)."""
    levels = np.arange(LEVELS, dtype=np.float64)
    diff = (levels[None, :] - levels[:, None]) / sigma
    return np.exp(-0.5 * diff * diff)


class BackgroundModel:
    """Per-pixel intensity densities plus the frame counter.

    ``accumulator`` has shape ``(height, width, 256)``; ``normalized`` is the
    same array divided by its per-pixel sum.
    """

    def __init__(self, params: GainParams, height: int, width: int):
        self.params = params
        self.height = height
        self.width = width
        self.frames_seen = 0
        self.accumulator: np.ndarray | None = None
        self.normalized: np.ndarray | None = None
        self._table = _kernel_table(params.sigma)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def _check(self, frame: Frame):
        if self.accumulator is None:
            raise BackgroundModelError("background model has not been initialised")
        if frame.shape != self.shape:
            raise ValueError(f"frame shape {frame.shape} does not match model {self.shape}")

    def _renormalize(self):
        total = self.accumulator.sum(axis=-1, keepdims=True)
        self.normalized = self.accumulator / total

    def deposit(self, frame: Frame, weight: float):
        """Add ``weight``-scaled normalised Gaussian kernels at the frame's intensities."""
        scale = weight / (self.params.sigma * _SQRT_2PI)
        self.accumulator += scale * self._table[frame.data]
        self._renormalize()


def init_model(first_frame: Frame, params: GainParams | None = None) -> BackgroundModel:
    """Model holding one unit-gain kernel per pixel at the first frame's intensity."""
    params = params or GainParams()
    model = BackgroundModel(params, first_frame.height, first_frame.width)
    scale = 1.0 / (params.sigma * _SQRT_2PI)
    model.accumulator = scale * model._table[first_frame.data]
    model._renormalize()
    model.frames_seen = 1
    return model


def update_model(model: BackgroundModel, frame: Frame) -> BackgroundModel:
    """Fold ``frame`` into the model in place and return it.

    The kernel weight is ``1 / gain_at(params, frames_seen)``, evaluated
    before the counter is incremented.
    """
    model._check(frame)
    gp = gain_at(model.params, model.frames_seen)
    model.deposit(frame, 1.0 / gp)
    model.frames_seen += 1
    return model


def background_estimate(model: BackgroundModel) -> Frame:
    if model.normalized is None:
        raise BackgroundModelError("background model has not been initialised")
    # argmax returns the first maximum, i.e. the lowest intensity on ties
    mode = np.argmax(model.normalized, axis=-1).astype(np.uint8)
    return Frame(model.width, model.height, mode)


def foreground_density_ratio(model: BackgroundModel, frame: Frame) -> np.ndarray:
    """Density at the observed intensity divided by the pixel's peak density."""
    model._check(frame)
    dens = model.normalized
    observed = np.take_along_axis(dens, frame.data[..., None].astype(np.intp), axis=-1)[..., 0]
    return observed / dens.max(axis=-1)


def extract_foreground(model: BackgroundModel, frame: Frame, tau: float = 0.05) -> Frame:
    """Binary mask (0/255): 255 where observed density < ``tau`` times the peak."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    ratio = foreground_density_ratio(model, frame)
    mask = np.where(ratio < tau, 255, 0).astype(np.uint8)
    return Frame(model.width, model.height, mask)
