"""Desk-scale detection subnet: backbone, RoI pooling, heads, loss and training."""

from ..boxes import BACKGROUND, NUM_CLASSES, Detection, RoiBox
from .network import (
    DetectorError,
    TinyDetector,
    conv_block,
    conv_forward,
    decision_signature,
    detect_objects,
    loss_and_grads,
    multitask_loss,
    sgd_step,
    sibling_heads,
    smooth_l1,
    softmax,
)
from .roi import project_roi, propose_from_mask, roi_max_pool, roi_pool_backward
from .training import LabeledRoi, TrainingImage, label_roi, sample_rois_hierarchical, train

__all__ = [
    "BACKGROUND",
    "NUM_CLASSES",
    "Detection",
    "DetectorError",
    "LabeledRoi",
    "RoiBox",
    "TinyDetector",
    "TrainingImage",
    "conv_block",
    "conv_forward",
    "decision_signature",
    "detect_objects",
    "label_roi",
    "loss_and_grads",
    "multitask_loss",
    "project_roi",
    "propose_from_mask",
    "roi_max_pool",
    "roi_pool_backward",
    "sample_rois_hierarchical",
    "sgd_step",
    "sibling_heads",
    "smooth_l1",
    "softmax",
    "train",
]
