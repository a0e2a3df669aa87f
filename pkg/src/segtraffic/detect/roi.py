"""Mask-driven region proposals and RoI max pooling."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from ..boxes import RoiBox


def propose_from_mask(mask, min_area: int = 1) -> list[RoiBox]:
    """Tight boxes of the 4-connected foreground components with ``area >= min_area``.

    Sorted by area (descending), then by ``(y, x)``.
    """
    mask = np.asarray(getattr(mask, "data", mask)) > 0
    labels, count = ndimage.label(mask)  # default structure is 4-connectivity
    if count == 0:
        return []
    areas = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    boxes = []
    for idx, sl in enumerate(ndimage.find_objects(labels)):
        if areas[idx] < min_area:
            continue
        ys, xs = sl
        box = RoiBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
        boxes.append((int(areas[idx]), box))
    boxes.sort(key=lambda ab: (-ab[0], ab[1].y, ab[1].x))
    return [b for _, b in boxes]


def _bins(extent: int, cells: int) -> list[tuple[int, int]]:
    return [
        (math.floor(i * extent / cells), math.ceil((i + 1) * extent / cells))
        for i in range(cells)
    ]


def roi_max_pool(fmap: np.ndarray, roi, grid_h: int, grid_w: int):
    """Max-pool the ``roi`` window of a ``(C, H, W)`` map onto a ``grid_h x grid_w`` grid.

    Returns ``(pooled, routing)``; ``routing[c, i, j]`` is the flat ``H * W``
    index of the maximum chosen for that cell (first in row-major order on
    ties).
    """
    fmap = np.asarray(getattr(fmap, "data", fmap))
    c, fh, fw = fmap.shape
    x, y, w, h = (int(v) for v in roi)
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > fw or y + h > fh:
        raise ValueError(f"roi {(x, y, w, h)} outside feature map of size {fw}x{fh}")
    if grid_h > h or grid_w > w or grid_h < 1 or grid_w < 1:
        raise ValueError(f"pooling grid {grid_h}x{grid_w} larger than roi window {h}x{w}")
    pooled = np.empty((c, grid_h, grid_w), dtype=fmap.dtype)
    routing = np.empty((c, grid_h, grid_w), dtype=np.intp)
    chans = np.arange(c)
    for i, (r0, r1) in enumerate(_bins(h, grid_h)):
        for j, (c0, c1) in enumerate(_bins(w, grid_w)):
            cell = fmap[:, y + r0 : y + r1, x + c0 : x + c1].reshape(c, -1)
            k = np.argmax(cell, axis=1)
            pooled[:, i, j] = cell[chans, k]
            cw = c1 - c0
            routing[:, i, j] = (y + r0 + k // cw) * fw + (x + c0 + k % cw)
    return pooled, routing


def roi_pool_backward(grad_out: np.ndarray, routing: np.ndarray, fmap_shape) -> np.ndarray:
    """Scatter pooled gradients back to the argmax positions recorded in ``routing``."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != routing.shape:
        raise ValueError(f"gradient shape {grad_out.shape} != routing shape {routing.shape}")
    c, fh, fw = fmap_shape
    if routing.shape[0] != c:
        raise ValueError("channel count of routing does not match feature map")
    grad = np.zeros((c, fh * fw), dtype=np.float64)
    chans = np.broadcast_to(np.arange(c)[:, None, None], routing.shape)
    np.add.at(grad, (chans.ravel(), routing.ravel()), grad_out.ravel())
    return grad.reshape(c, fh, fw)


def project_roi(box, fmap_hw: tuple[int, int], stride: int = 4, min_size: int = 4):
    """Image box to feature-map window: divide by ``stride`` and floor.

    Windows smaller than ``min_size`` are grown symmetrically and shifted to
    stay inside the map, so small objects are pooled together with some
    surrounding context.
    """
    fh, fw = fmap_hw
    if fh < min_size or fw < min_size:
        raise ValueError(f"feature map {fw}x{fh} smaller than the pooling grid")
    x, y, w, h = (int(v) for v in box)

    def axis(start, extent, limit):
        s, e = start // stride, max(extent // stride, 1)
        if e < min_size:
            s -= (min_size - e) // 2
            e = min_size
        e = min(e, limit)
        s = min(max(s, 0), limit - e)
        return s, e

    fx, fwid = axis(x, w, fw)
    fy, fhei = axis(y, h, fh)
    return fx, fy, fwid, fhei
