"""Tiny two-stage-style detector: conv backbone, RoI pooling, sibling heads.

Everything is plain numpy in float64 with hand-written backward passes so
the whole chain can be checked against finite differences.

Backbone: two blocks of 3x3 conv (stride 1, zero pad 1) -> ReLU -> 2x2 max
pool, with 8 then 16 channels; total stride 4.  Input pixels are scaled to
[0, 1].  Each RoI is max-pooled to 16x4x4, flattened, passed through a
32-unit ReLU layer and then into two heads: 7-way softmax (6 classes plus
background at index 6) and additive box offsets, 4 per class.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..boxes import BACKGROUND, NUM_CLASSES, Detection, RoiBox
from .roi import project_roi, roi_max_pool, roi_pool_backward

STRIDE = 4
POOL_GRID = 4
HIDDEN = 32
NUM_OUTPUTS = NUM_CLASSES + 1

PARAM_SHAPES = {
    "conv1_w": (8, 1, 3, 3),
    "conv1_b": (8,),
    "conv2_w": (16, 8, 3, 3),
    "conv2_b": (16,),
    "fc_w": (HIDDEN, 16 * POOL_GRID * POOL_GRID),
    "fc_b": (HIDDEN,),
    "cls_w": (NUM_OUTPUTS, HIDDEN),
    "cls_b": (NUM_OUTPUTS,),
    "box_w": (NUM_CLASSES * 4, HIDDEN),
    "box_b": (NUM_CLASSES * 4,),
}
MAGIC = b"TDET1"


class DetectorError(RuntimeError):
    pass


@dataclass
class TinyDetector:
    params: dict[str, np.ndarray]
    lam: float = 1.0
    seed: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, lam: float = 1.0, scale: float = 0.05) -> "TinyDetector":
        """Weights uniform in ``[-scale, scale]``, biases zero."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.uniform(-scale, scale, size=shape)
        return cls(params, lam=lam, seed=seed)

    @classmethod
    def zeros(cls, lam: float = 1.0) -> "TinyDetector":
        return cls({k: np.zeros(s) for k, s in PARAM_SHAPES.items()}, lam=lam)

    def copy(self) -> "TinyDetector":
        return TinyDetector(
            {k: v.copy() for k, v in self.params.items()},
            lam=self.lam,
            seed=self.seed,
            velocity={k: v.copy() for k, v in self.velocity.items()},
        )

    # serialisation: MAGIC, float64 lambda, then every array of PARAM_SHAPES
    # in declaration order, C order, little-endian float64
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<d", float(self.lam)))
        for name in PARAM_SHAPES:
            buf.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TinyDetector":
        if blob[: len(MAGIC)] != MAGIC:
            raise DetectorError("not a detector blob (bad magic)")
        sizes = [int(np.prod(s)) for s in PARAM_SHAPES.values()]
        expected = len(MAGIC) + 8 * (1 + sum(sizes))
        if len(blob) != expected:
            raise DetectorError(f"detector blob has {len(blob)} bytes, expected {expected}")
        (lam,) = struct.unpack_from("<d", blob, len(MAGIC))
        flat = np.frombuffer(blob, dtype="<f8", offset=len(MAGIC) + 8)
        params, off = {}, 0
        for (name, shape), size in zip(PARAM_SHAPES.items(), sizes):
            params[name] = flat[off : off + size].reshape(shape).astype(np.float64)
            off += size
        return cls(params, lam=lam)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TinyDetector":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# --- layers -----------------------------------------------------------------


def _conv(x, w, b):
    """3x3 conv, stride 1, zero pad 1.  x: (Cin, H, W) -> (Cout, H, W)."""
    cols = sliding_window_view(np.pad(x, ((0, 0), (1, 1), (1, 1))), (3, 3), axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", cols, w, optimize=True) + b[:, None, None], cols


def _conv_backward(dout, cols, w, need_input=True):
    dw = np.einsum("chwij,ohw->ocij", cols, dout, optimize=True)
    db = dout.sum(axis=(1, 2))
    if not need_input:
        return None, dw, db
    _, h, wd = dout.shape
    dxp = np.zeros((w.shape[1], h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wd] += np.einsum("oc,ohw->chw", w[:, :, i, j], dout)
    return dxp[:, 1:-1, 1:-1], dw, db


def _maxpool2(x):
    """2x2 stride-2 max pool (odd trailing row/column dropped); returns (out, argmax)."""
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(c, h2, w2, 4)
    arg = np.argmax(blocks, axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _maxpool2_backward(dout, arg, in_shape):
    c, h, w = in_shape
    h2, w2 = dout.shape[1:]
    blocks = np.zeros((c, h2, w2, 4))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(in_shape)
    dx[:, : 2 * h2, : 2 * w2] = blocks.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(
        c, 2 * h2, 2 * w2
    )
    return dx


def conv_block(x, w, b):
    """One backbone block on a ``(Cin, H, W)`` array: conv, ReLU, 2x2 max pool."""
    return _maxpool2(np.maximum(_conv(np.asarray(x, dtype=np.float64), w, b)[0], 0.0))[0]


def _image(frame) -> np.ndarray:
    data = np.asarray(getattr(frame, "data", frame), dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("expected a single-channel image")
    if data.shape[0] < 8 or data.shape[1] < 8:
        raise ValueError(f"image {data.shape[1]}x{data.shape[0]} too small, need at least 8x8")
    return data / 255.0


def _backbone(detector: TinyDetector, frame):
    p = detector.params
    x = _image(frame)[None]
    a1, cols1 = _conv(x, p["conv1_w"], p["conv1_b"])
    r1 = np.maximum(a1, 0.0)
    p1, arg1 = _maxpool2(r1)
    a2, cols2 = _conv(p1, p["conv2_w"], p["conv2_b"])
    r2 = np.maximum(a2, 0.0)
    fmap, arg2 = _maxpool2(r2)
    cache = dict(cols1=cols1, a1=a1, arg1=arg1, cols2=cols2, a2=a2, arg2=arg2, p1_shape=p1.shape)
    return fmap, cache


def _backbone_backward(detector: TinyDetector, dfmap, cache, grads):
    p = detector.params
    dr2 = _maxpool2_backward(dfmap, cache["arg2"], cache["a2"].shape)
    da2 = dr2 * (cache["a2"] > 0)
    dp1, dw2, db2 = _conv_backward(da2, cache["cols2"], p["conv2_w"])
    dr1 = _maxpool2_backward(dp1, cache["arg1"], cache["a1"].shape)
    da1 = dr1 * (cache["a1"] > 0)
    _, dw1, db1 = _conv_backward(da1, cache["cols1"], p["conv1_w"], need_input=False)
    grads["conv2_w"] += dw2
    grads["conv2_b"] += db2
    grads["conv1_w"] += dw1
    grads["conv1_b"] += db1


def conv_forward(detector: TinyDetector, frame) -> np.ndarray:
    """Feature map of shape ``(16, H // 4, W // 4)``."""
    return _backbone(detector, frame)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _heads(detector: TinyDetector, pooled):
    p = detector.params
    v = np.asarray(pooled, dtype=np.float64).reshape(-1)
    if v.size != p["fc_w"].shape[1]:
        raise ValueError(f"pooled features have {v.size} values, expected {p['fc_w'].shape[1]}")
    pre = p["fc_w"] @ v + p["fc_b"]
    hidden = np.maximum(pre, 0.0)
    logits = p["cls_w"] @ hidden + p["cls_b"]
    deltas = (p["box_w"] @ hidden + p["box_b"]).reshape(NUM_CLASSES, 4)
    return softmax(logits), deltas, (v, pre, hidden)


def sibling_heads(detector: TinyDetector, pooled):
    """``(class_probs[7], box_deltas[6, 4])`` for one pooled 16x4x4 RoI."""
    probs, deltas, _ = _heads(detector, pooled)
    return probs, deltas


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def multitask_loss(class_probs, true_class: int, box_deltas=None, box_target=None, lam: float = 1.0) -> float:
    """Log loss on the true class plus ``lam`` times smooth-L1 box error for non-background."""
    if not 0 <= true_class <= BACKGROUND:
        raise ValueError(f"true_class must lie in 0..{BACKGROUND}")
    loss = -np.log(max(float(class_probs[true_class]), 1e-12))
    if true_class != BACKGROUND:
        if box_target is None or box_deltas is None:
            raise ValueError("box target required for a non-background class")
        deltas = np.asarray(box_deltas, dtype=np.float64)
        if deltas.shape == (NUM_CLASSES, 4):
            deltas = deltas[true_class]
        diff = deltas - np.asarray(box_target, dtype=np.float64)
        loss += lam * float(smooth_l1(diff).sum())
    return float(loss)


def roi_window(fmap, box):
    return project_roi(box, fmap.shape[1:], STRIDE, POOL_GRID)


def loss_and_grads(detector: TinyDetector, frame, rois, labels, targets, grads=None):
    """Summed multitask loss over the RoIs of one image and its parameter gradients.

    ``targets[i]`` is the ``(dx, dy, dw, dh)`` offset from RoI ``i`` to its
    ground-truth box (ignored for background).  Gradients are added into
    ``grads`` when supplied.
    """
    p = detector.params
    if grads is None:
        grads = {k: np.zeros_like(v) for k, v in p.items()}
    fmap, cache = _backbone(detector, frame)
    dfmap = np.zeros_like(fmap)
    total = 0.0
    for roi, label, target in zip(rois, labels, targets):
        pooled, routing = roi_max_pool(fmap, roi_window(fmap, roi), POOL_GRID, POOL_GRID)
        probs, deltas, (v, pre, hidden) = _heads(detector, pooled)
        total += multitask_loss(probs, label, deltas, target, detector.lam)

        dlogits = probs.copy()
        dlogits[label] -= 1.0
        ddeltas = np.zeros((NUM_CLASSES, 4))
        if label != BACKGROUND:
            diff = deltas[label] - np.asarray(target, dtype=np.float64)
            ddeltas[label] = detector.lam * np.clip(diff, -1.0, 1.0)
        ddeltas = ddeltas.reshape(-1)
        grads["cls_w"] += np.outer(dlogits, hidden)
        grads["cls_b"] += dlogits
        grads["box_w"] += np.outer(ddeltas, hidden)
        grads["box_b"] += ddeltas
        dpre = (p["cls_w"].T @ dlogits + p["box_w"].T @ ddeltas) * (pre > 0)
        grads["fc_w"] += np.outer(dpre, v)
        grads["fc_b"] += dpre
        dpooled = (p["fc_w"].T @ dpre).reshape(pooled.shape)
        dfmap += roi_pool_backward(dpooled, routing, fmap.shape)
    _backbone_backward(detector, dfmap, cache, grads)
    return total, grads


def decision_signature(detector: TinyDetector, frame, rois) -> tuple:
    """Discrete choices (ReLU signs, pooling argmaxes) made by a forward pass.

    Two parameter settings with equal signatures lie in the same smooth
    piece of the network, which is what finite-difference checks need.
    """
    fmap, cache = _backbone(detector, frame)
    parts = [cache["a1"] > 0, cache["arg1"], cache["a2"] > 0, cache["arg2"]]
    for roi in rois:
        pooled, routing = roi_max_pool(fmap, roi_window(fmap, roi), POOL_GRID, POOL_GRID)
        _, _, (_, pre, _) = _heads(detector, pooled)
        parts += [routing, pre > 0]
    return tuple(np.asarray(a).tobytes() for a in parts)


def sgd_step(detector: TinyDetector, grads: dict, lr: float, momentum: float = 0.9) -> TinyDetector:
    """Momentum SGD in place: ``v = momentum * v - lr * g``; ``param += v``."""
    if not lr > 0:
        raise ValueError("learning rate must be > 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    for name, g in grads.items():
        if name not in detector.params:
            raise ValueError(f"unknown parameter {name!r}")
        if np.shape(g) != detector.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise DetectorError(f"non-finite gradient for {name}; step rejected")
    for name, g in grads.items():
        vel = detector.velocity.get(name)
        if vel is None:
            vel = np.zeros_like(detector.params[name])
        vel = momentum * vel - lr * np.asarray(g, dtype=np.float64)
        detector.velocity[name] = vel
        detector.params[name] = detector.params[name] + vel
    return detector


def _refine(box: RoiBox, delta, width: int, height: int) -> RoiBox:
    x = box.x + float(delta[0])
    y = box.y + float(delta[1])
    w = box.w + float(delta[2])
    h = box.h + float(delta[3])
    x0 = int(np.clip(np.floor(x + 0.5), 0, width - 1))
    y0 = int(np.clip(np.floor(y + 0.5), 0, height - 1))
    x1 = int(np.clip(np.floor(x + w + 0.5), x0 + 1, width))
    y1 = int(np.clip(np.floor(y + h + 0.5), y0 + 1, height))
    return RoiBox(x0, y0, x1 - x0, y1 - y0)


def detect_objects(detector: TinyDetector, frame, proposals, confidence_threshold: float = 0.5,
                   fmap=None) -> list[Detection]:
    """Score every proposal; keep those whose best vehicle class reaches the threshold."""
    if not proposals:
        return []
    image = np.asarray(getattr(frame, "data", frame))
    height, width = image.shape
    if fmap is None:
        fmap = conv_forward(detector, image)
    out = []
    for box in proposals:
        box = box if isinstance(box, RoiBox) else RoiBox.from_seq(box)
        pooled, _ = roi_max_pool(fmap, roi_window(fmap, box), POOL_GRID, POOL_GRID)
        probs, deltas = sibling_heads(detector, pooled)
        cls = int(np.argmax(probs[:NUM_CLASSES]))
        score = float(np.clip(probs[cls], 0.0, 1.0))
        if score >= confidence_threshold:
            out.append(Detection(_refine(box, deltas[cls], width, height), cls, score))
    return out
