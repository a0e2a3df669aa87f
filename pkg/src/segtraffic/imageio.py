"""Netpbm frame I/O and deterministic synthetic traffic scenes.

Frames are 8-bit grayscale.  Binary PGM (``P5``) is read and written;
binary PPM (``P6``) is accepted on read and reduced to luma.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FRAME_PATTERN = "frame_%06d.pgm"
_FRAME_RE = re.compile(r"^frame_(\d{6})\.p[gp]m$")


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported netpbm data."""


@dataclass(frozen=True, eq=False)
class Frame:
    """Grayscale image, ``data`` has shape ``(height, width)`` and dtype uint8."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.width < 1 or self.height < 1:
            raise ValueError(f"frame dimensions must be >= 1, got {self.width}x{self.height}")
        if data.shape != (self.height, self.width):
            if data.size != self.width * self.height:
                raise ValueError(
                    f"frame data has {data.size} values, expected {self.width * self.height}"
                )
            data = data.reshape(self.height, self.width)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array) -> "Frame":
        array = np.asarray(array)
        if array.ndim != 2:
            raise ValueError("frame array must be 2-D")
        if array.dtype != np.uint8:
            if array.size and (array.min() < 0 or array.max() > 255):
                raise ValueError("frame values must lie in 0..255")
            array = array.astype(np.uint8)
        return cls(width=array.shape[1], height=array.shape[0], data=array)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"Frame({self.width}x{self.height})"


def _read_header(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Return ``count`` whitespace-separated header tokens after the magic.

    Comments (``#`` to end of line) are skipped.  The returned offset points
    at the first payload byte, i.e. one past the single whitespace byte that
    terminates the last token.
    """
    tokens: list[bytes] = []
    pos = 2
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in b" \t\r\n":
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in b" \t\r\n#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated netpbm header")
        tokens.append(data[start:pos])
    if pos >= n or data[pos] not in b" \t\r\n":
        raise ImageFormatError("netpbm header not terminated by whitespace")
    return tokens, pos + 1


def read_pgm(data: bytes) -> Frame:
    """Decode a binary PGM (or PPM, converted to luma) into a :class:`Frame`."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError("not a binary PGM/PPM file (expected magic P5 or P6)")
    channels = 1 if data[:2] == b"P5" else 3
    tokens, offset = _read_header(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"malformed header values {tokens!r}") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}")
    if maxval < 1 or maxval > 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 1..255 supported)")
    size = width * height * channels
    payload = data[offset : offset + size]
    if len(payload) < size:
        raise ImageFormatError(f"truncated payload: expected {size} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        rgb = pixels.reshape(height, width, 3).astype(np.float64)
        luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        # round half up, exact for the non-negative values here
        pixels = np.floor(luma + 0.5).clip(0, 255).astype(np.uint8)
    return Frame(width, height, pixels.reshape(height, width).copy())


def write_pgm(frame: Frame) -> bytes:
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    return header + frame.data.tobytes()


def load_frame(path) -> Frame:
    return read_pgm(Path(path).read_bytes())


def save_frame(path, frame: Frame) -> None:
    Path(path).write_bytes(write_pgm(frame))


def list_frame_files(directory) -> list[Path]:
    """Frame files (``frame_NNNNNN.pgm``/``.ppm``) in index order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    files = [p for p in directory.iterdir() if _FRAME_RE.match(p.name)]
    return sorted(files, key=lambda p: int(_FRAME_RE.match(p.name).group(1)))


def frame_index(path) -> int:
    m = _FRAME_RE.match(Path(path).name)
    if m is None:
        raise ValueError(f"not a frame file name: {path}")
    return int(m.group(1))


class FrameSequence(list):
    """Non-empty list of equally sized frames; frame ``j`` lives at ``seq[j - 1]``."""

    def __init__(self, frames: Iterable[Frame]):
        super().__init__(frames)
        if not self:
            raise ValueError("frame sequence must not be empty")
        shape = self[0].shape
        for i, f in enumerate(self):
            if f.shape != shape:
                raise ValueError(f"frame {i + 1} has shape {f.shape}, expected {shape}")


# --- synthetic scenes -------------------------------------------------------


@dataclass
class SceneObject:
    """Bright rectangle moving linearly; visible on frames ``start..end`` (1-based)."""

    class_id: int
    x: float
    y: float
    w: int
    h: int
    vx: float = 0.0
    vy: float = 0.0
    intensity: int = 200
    start: int = 1
    end: int | None = None

    def box_at(self, j: int) -> tuple[int, int, int, int] | None:
        """Unclipped integer box at frame ``j`` or None when not visible."""
        if j < self.start or (self.end is not None and j > self.end):
            return None
        t = j - self.start
        x = math.floor(self.x + self.vx * t + 0.5)
        y = math.floor(self.y + self.vy * t + 0.5)
        return x, y, int(self.w), int(self.h)


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    num_frames: int = 50
    background: int = 40
    noise: int = 4
    objects: list[SceneObject] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {"width", "height", "num_frames", "background", "noise", "objects"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        objs = [SceneObject(**o) for o in d.get("objects", [])]
        kwargs = {k: d[k] for k in known - {"objects"} if k in d}
        return cls(objects=objs, **kwargs)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "num_frames": self.num_frames,
            "background": self.background,
            "noise": self.noise,
            "objects": [vars(o).copy() for o in self.objects],
        }


def _clip_box(box, width, height):
    x, y, w, h = box
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, width), min(y + h, height)
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, x1 - x0, y1 - y0


def gen_synthetic_sequence(cfg: SceneConfig, seed: int):
    """Render ``cfg`` into frames plus per-frame ground truth.

    Returns ``(FrameSequence, truth)`` where ``truth[j - 1]`` is the list of
    ground-truth dicts ``{"frame", "class_id", "bbox"}`` for frame ``j``.
    Objects are painted in list order, later ones on top; noise is uniform
    integer jitter in ``[-noise, +noise]`` added to every pixel.
    """
    if cfg.num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    rng = np.random.default_rng(seed)
    frames = []
    truth = []
    for j in range(1, cfg.num_frames + 1):
        canvas = np.full((cfg.height, cfg.width), cfg.background, dtype=np.int64)
        boxes = []
        for obj in cfg.objects:
            raw = obj.box_at(j)
            if raw is None:
                continue
            box = _clip_box(raw, cfg.width, cfg.height)
            if box is None:
                continue
            x, y, w, h = box
            canvas[y : y + h, x : x + w] = obj.intensity
            boxes.append({"frame": j, "class_id": int(obj.class_id), "bbox": [x, y, w, h]})
        if cfg.noise > 0:
            canvas += rng.integers(-cfg.noise, cfg.noise + 1, size=canvas.shape)
        frames.append(Frame.from_array(np.clip(canvas, 0, 255).astype(np.uint8)))
        truth.append(boxes)
    return FrameSequence(frames), truth


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jsonl(path, validate=None) -> list[dict]:
    """Parse a JSON-lines file; errors name the offending line number.

    ``validate(record)`` may raise ``ValueError`` to reject a record.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            if validate is not None:
                try:
                    validate(rec)
                except (ValueError, TypeError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
            out.append(rec)
    return out


def write_sequence(out_dir, frames: FrameSequence, truth) -> Path:
    """Write frames as ``frame_%06d.pgm`` under ``out_dir/frames`` and ``gt.jsonl``."""
    out_dir = Path(out_dir)
    frame_dir = out_dir / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    for j, frame in enumerate(frames, 1):
        save_frame(frame_dir / (FRAME_PATTERN % j), frame)
    write_jsonl(out_dir / "gt.jsonl", (rec for recs in truth for rec in recs))
    return frame_dir


def traffic_scene(num_frames: int = 200, seed: int = 0, width: int = 64, height: int = 64,
                  quiet_frames: int = 21, small=(8, 8), large=(16, 16), speed: float = 2.0,
                  period: int = 30) -> SceneConfig:
    """Two-class toy traffic: small and large bright rectangles crossing three lanes.

    No object appears during the first ``quiet_frames`` frames so the
    background model can settle on an empty road.  Each lane spawns a new
    object every ``period`` frames, alternating direction per lane; a
    vehicle leaves the scene before the next one enters its lane.
    """
    rng = np.random.default_rng(seed)
    lane_h = height // 3
    objects = []
    for lane in range(3):
        t = quiet_frames + 1 + lane * (period // 3)
        while t <= num_frames:
            cls = int(rng.integers(0, 2))
            w, h = small if cls == 0 else large
            y = lane * lane_h + (lane_h - h) // 2 + int(rng.integers(-1, 2))
            y = min(max(y, 0), height - h)
            travel = width - w - 4
            frames = int(travel // speed)
            if lane % 2 == 0:
                x0, vx = 2, speed
            else:
                x0, vx = width - w - 2, -speed
            objects.append(SceneObject(
                class_id=cls, x=x0, y=y, w=w, h=h, vx=vx,
                intensity=int(rng.integers(170, 231)), start=t, end=min(t + frames, num_frames),
            ))
            t += period
    return SceneConfig(width=width, height=height, num_frames=num_frames, background=40,
                       noise=4, objects=objects)
