"""Training corpus construction, hierarchical RoI sampling and the SGD loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..boxes import BACKGROUND, RoiBox, box_iou
from .network import TinyDetector, loss_and_grads, sgd_step

log = logging.getLogger(__name__)


@dataclass
class LabeledRoi:
    box: RoiBox
    label: int
    target: np.ndarray | None  # (dx, dy, dw, dh) to the matched ground truth


@dataclass
class TrainingImage:
    image: np.ndarray
    rois: list[LabeledRoi]


def label_roi(box: RoiBox, gts, iou_min: float = 0.5) -> LabeledRoi:
    """Class of the best-overlapping ground truth if IoU reaches ``iou_min``, else background.

    ``gts`` is a sequence of ``(class_id, RoiBox)`` pairs.
    """
    best, best_iou = None, 0.0
    for cls, gt in gts:
        iou = box_iou(box, gt)
        if iou > best_iou:
            best, best_iou = (cls, gt), iou
    if best is None or best_iou < iou_min:
        return LabeledRoi(box, BACKGROUND, None)
    cls, gt = best
    target = np.array([gt.x - box.x, gt.y - box.y, gt.w - box.w, gt.h - box.h], dtype=np.float64)
    return LabeledRoi(box, int(cls), target)


def random_background_boxes(rng, shape, gts, count: int, min_size=6, max_size=24, max_iou=0.3):
    """Up to ``count`` random boxes overlapping every ground truth by less than ``max_iou``."""
    h, w = shape
    out = []
    for _ in range(count * 20):
        if len(out) >= count:
            break
        bw = int(rng.integers(min_size, min(max_size, w) + 1))
        bh = int(rng.integers(min_size, min(max_size, h) + 1))
        box = RoiBox(int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1)), bw, bh)
        if all(box_iou(box, gt) < max_iou for _, gt in gts):
            out.append(box)
    return out


def jittered(rng, box: RoiBox, shape, amount: int = 1) -> RoiBox:
    h, w = shape
    d = rng.integers(-amount, amount + 1, size=4)
    x = int(np.clip(box.x + d[0], 0, w - 1))
    y = int(np.clip(box.y + d[1], 0, h - 1))
    bw = int(np.clip(box.w + d[2], 1, w - x))
    bh = int(np.clip(box.h + d[3], 1, h - y))
    return RoiBox(x, y, bw, bh)


def sample_rois_hierarchical(frames_with_rois, images_per_batch: int, rois_per_image: int, seed):
    """Pick images without replacement, then RoIs within each picked image.

    ``frames_with_rois`` is a sequence whose items are sequences of RoIs.
    RoIs are drawn without replacement when an image has enough of them and
    with replacement otherwise.  Returns a list of ``(image_index, roi)``.
    """
    n = len(frames_with_rois)
    if n == 0:
        raise ValueError("cannot sample from an empty corpus")
    if images_per_batch < 1 or rois_per_image < 1:
        raise ValueError("batch sizes must be >= 1")
    if images_per_batch > n:
        raise ValueError(f"images_per_batch={images_per_batch} exceeds corpus size {n}")
    rng = np.random.default_rng(seed)
    batch = []
    for i in rng.choice(n, size=images_per_batch, replace=False):
        rois = frames_with_rois[int(i)]
        if len(rois) == 0:
            raise ValueError(f"image {int(i)} has no RoIs")
        picks = rng.choice(len(rois), size=rois_per_image, replace=len(rois) < rois_per_image)
        batch.extend((int(i), rois[int(k)]) for k in picks)
    return batch


def batch_loss_and_grads(detector: TinyDetector, corpus: list[TrainingImage], batch):
    """Mean multitask loss over a sampled batch and the matching mean gradients."""
    grads = {k: np.zeros_like(v) for k, v in detector.params.items()}
    by_image: dict[int, list[LabeledRoi]] = {}
    for i, roi in batch:
        by_image.setdefault(i, []).append(roi)
    total = 0.0
    for i, rois in by_image.items():
        loss, _ = loss_and_grads(
            detector,
            corpus[i].image,
            [r.box for r in rois],
            [r.label for r in rois],
            [r.target for r in rois],
            grads,
        )
        total += loss
    n = len(batch)
    return total / n, {k: g / n for k, g in grads.items()}


def train(detector: TinyDetector, corpus: list[TrainingImage], epochs: int, *,
          images_per_batch: int = 5, rois_per_image: int = 8, batches_per_epoch: int = 1,
          lr: float = 0.01, momentum: float = 0.9, seed: int = 0) -> list[float]:
    """Run hierarchical mini-batch SGD in place; returns the mean loss of every epoch.

    An epoch is ``batches_per_epoch`` sampled mini-batches; its loss is the
    mean of the batch losses measured before each step.
    """
    images_per_batch = min(images_per_batch, len(corpus))
    history = []
    roi_lists = [img.rois for img in corpus]
    for epoch in range(epochs):
        losses = []
        for b in range(batches_per_epoch):
            batch = sample_rois_hierarchical(roi_lists, images_per_batch, rois_per_image, [seed, epoch, b])
            loss, grads = batch_loss_and_grads(detector, corpus, batch)
            sgd_step(detector, grads, lr, momentum)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.5f", epoch + 1, history[-1])
    return history
