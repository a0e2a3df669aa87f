"""Box and detection records shared by the detector, mesh and evaluation code."""

from __future__ import annotations

from dataclasses import dataclass

NUM_CLASSES = 6
BACKGROUND = NUM_CLASSES  # index of the background class in the 7-way softmax


@dataclass(frozen=True, order=True)
class RoiBox:
    """Axis-aligned box: top-left ``(x, y)`` and extent ``(w, h)`` in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box extent must be >= 1, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be >= 0, got ({self.x}, {self.y})")

    def __iter__(self):
        return iter((self.x, self.y, self.w, self.h))

    @property
    def area(self) -> int:
        return self.w * self.h

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_seq(cls, seq) -> "RoiBox":
        x, y, w, h = (int(v) for v in seq)
        return cls(x, y, w, h)


@dataclass(frozen=True)
class Detection:
    box: RoiBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ValueError(f"class_id must lie in 0..{NUM_CLASSES - 1}, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def to_record(self, frame: int) -> dict:
        return {
            "frame": int(frame),
            "class_id": int(self.class_id),
            "bbox": self.box.as_list(),
            "score": float(self.score),
        }


def box_iou(a, b) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes on the continuous plane."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union
