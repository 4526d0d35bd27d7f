"""Compact anchor-free grid detector with hand-written backprop.

Backbone: three stride-2 3x3 conv blocks (the last followed by a stride-1
3x3 conv), leaky-ReLU activations.  A 1x1 head predicts, per cell of the
S x S grid (S = image_size / 8), the channels::

    [obj, cls_0 .. cls_{C-1}, tx, ty, tw, th]

Box decoding: ``cx = (col + sigmoid(tx)) / S``, ``cy = (row + sigmoid(ty)) / S``,
``w = anchor * exp(tw)``, ``h = anchor * exp(th)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sfdet import nn
from sfdet.datagen import LabeledBox, boxes_to_array
from sfdet.params import ParamSet

log = logging.getLogger(__name__)

STRIDE = 8
ANCHOR = 0.25
TW_CLIP = 8.0
# (name, stride); block 3 is a stride-2 conv followed by a stride-1 conv
BACKBONE = (("b1", 2), ("b2", 2), ("b3", 2), ("b3c", 1))


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during optimisation."""


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    image_size: int = 64
    widths: tuple[int, int, int] = (16, 32, 40)
    anchor: float = ANCHOR

    @property
    def grid(self) -> int:
        return self.image_size // STRIDE

    def to_meta(self) -> dict:
        return {"kind": "detector", "num_classes": self.num_classes, "image_size": self.image_size,
                "widths": list(self.widths), "anchor": self.anchor}

    @classmethod
    def from_meta(cls, meta: dict) -> "DetectorConfig":
        return cls(num_classes=int(meta["num_classes"]), image_size=int(meta["image_size"]),
                   widths=tuple(meta["widths"]), anchor=float(meta["anchor"]))


@dataclass(frozen=True)
class LossWeights:
    box: float = 0.05
    cls: float = 0.5
    obj: float = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    l_box: float
    l_cls: float
    l_obj: float
    total: float
    weights: LossWeights


@dataclass(frozen=True)
class Detection:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float

    def to_label(self) -> LabeledBox:
        return LabeledBox(self.class_id, self.cx, self.cy, self.w, self.h)


def init_detector(cfg: DetectorConfig = DetectorConfig(), seed: int = 0, dtype=np.float32) -> ParamSet:
    if cfg.image_size % STRIDE or cfg.image_size < 32:
        raise ValueError(f"image_size must be a multiple of {STRIDE} and >= 32")
    rng = np.random.default_rng(seed)
    w1, w2, w3 = cfg.widths
    chans = {"b1": (3, w1), "b2": (w1, w2), "b3": (w2, w3), "b3c": (w3, w3)}
    params: ParamSet = {}
    for name, _ in BACKBONE:
        params[f"{name}.w"], params[f"{name}.b"] = nn.conv_init(rng, 3, *chans[name], dtype=dtype)
    out = 5 + cfg.num_classes
    params["head.w"] = (rng.normal(0.0, 0.01, size=(1, 1, w3, out))).astype(dtype)
    head_b = np.zeros(out, dtype=dtype)
    head_b[0] = -4.0  # rare objects: start with low objectness
    params["head.b"] = head_b
    return params


def num_classes(params: ParamSet) -> int:
    return params["head.b"].shape[0] - 5


def _as_batch(images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected HxWx3 image(s), got shape {images.shape}")
    if images.shape[1] % STRIDE or images.shape[2] % STRIDE:
        raise ValueError(f"image size {images.shape[1:3]} is not a multiple of {STRIDE}")
    return images, single


def check_image_size(images: np.ndarray, cfg: DetectorConfig) -> None:
    shape = np.asarray(images).shape
    if shape[-3:-1] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"image size {shape[-3:-1]} does not match detector size {cfg.image_size}")


def forward_train(params: ParamSet, images: np.ndarray):
    """Forward pass keeping what backward needs.

    Returns ``(grid, features, cache)`` where ``features`` is the output of
    the last backbone block (alignment and shift measurements use it).
    """
    x, _ = _as_batch(images)
    x = x.astype(params["head.w"].dtype, copy=False)
    caches = []
    for name, stride in BACKBONE:
        z, conv_cache = nn.conv2d_forward(x, params[f"{name}.w"], params[f"{name}.b"], stride)
        x, act_cache = nn.leaky_relu_forward(z)
        caches.append((conv_cache, act_cache))
    feats = x
    grid, head_cache = nn.conv2d_forward(feats, params["head.w"], params["head.b"], 1)
    return grid, feats, (caches, head_cache)


def backward(params: ParamSet, cache, dgrid: np.ndarray, dfeat: np.ndarray | None = None) -> ParamSet:
    """Parameter gradients given d(loss)/d(grid) and optionally d(loss)/d(features)."""
    caches, head_cache = cache
    grads: ParamSet = {}
    dx, grads["head.w"], grads["head.b"] = nn.conv2d_backward(dgrid, head_cache)
    if dfeat is not None:
        dx = dx + dfeat
    for (name, _), (conv_cache, act_cache) in zip(reversed(BACKBONE), reversed(caches)):
        dz = nn.leaky_relu_backward(dx, act_cache)
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = nn.conv2d_backward(dz, conv_cache)
    return {name: grads[name] for name in params}


def forward(params: ParamSet, images: np.ndarray, cfg: DetectorConfig | None = None) -> np.ndarray:
    """Raw grid for one image (S, S, 5+C) or a batch (N, S, S, 5+C)."""
    if cfg is not None:
        check_image_size(images, cfg)
    _, single = _as_batch(images)
    grid, _, _ = forward_train(params, images)
    return grid[0] if single else grid


def features(params: ParamSet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    images, _ = _as_batch(images)
    out = [forward_train(params, images[i:i + batch_size])[1] for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def predict(params: ParamSet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    images, _ = _as_batch(images)
    return np.concatenate([forward_train(params, images[i:i + batch_size])[0]
                           for i in range(0, len(images), batch_size)])


# ---------------------------------------------------------------- geometry

def iou(a, b) -> float:
    """IoU of two boxes given as (cx, cy, w, h) tuples or box objects."""
    a = _cxcywh(a)
    b = _cxcywh(b)
    return float(iou_matrix(np.array([a]), np.array([b]))[0, 0])


def _cxcywh(box) -> tuple[float, float, float, float]:
    if hasattr(box, "cx"):
        return (box.cx, box.cy, box.w, box.h)
    return tuple(float(v) for v in box)  # type: ignore[return-value]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) arrays of cx, cy, w, h."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[:, 2], 0, None) * np.clip(a[:, 3], 0, None)
    area_b = np.clip(b[:, 2], 0, None) * np.clip(b[:, 3], 0, None)
    union = area_a[:, None] + area_b[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def _iou_with_grad(p: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise IoU of predicted vs target (P, 4) boxes and d(iou)/d(pred)."""
    px0, px1 = p[:, 0] - p[:, 2] / 2, p[:, 0] + p[:, 2] / 2
    py0, py1 = p[:, 1] - p[:, 3] / 2, p[:, 1] + p[:, 3] / 2
    tx0, tx1 = t[:, 0] - t[:, 2] / 2, t[:, 0] + t[:, 2] / 2
    ty0, ty1 = t[:, 1] - t[:, 3] / 2, t[:, 1] + t[:, 3] / 2
    iw_raw = np.minimum(px1, tx1) - np.maximum(px0, tx0)
    ih_raw = np.minimum(py1, ty1) - np.maximum(py0, ty0)
    iw, ih = np.maximum(iw_raw, 0), np.maximum(ih_raw, 0)
    inter = iw * ih
    area_p = p[:, 2] * p[:, 3]
    union = area_p + t[:, 2] * t[:, 3] - inter
    out = inter / union
    d_inter = (union + inter) / union ** 2
    d_areap = -inter / union ** 2
    # d iw / d px0, px1 (zero when there is no overlap)
    on_w, on_h = iw_raw > 0, ih_raw > 0
    diw_dx0 = np.where(on_w & (px0 > tx0), -1.0, 0.0)
    diw_dx1 = np.where(on_w & (px1 < tx1), 1.0, 0.0)
    dih_dy0 = np.where(on_h & (py0 > ty0), -1.0, 0.0)
    dih_dy1 = np.where(on_h & (py1 < ty1), 1.0, 0.0)
    d_iw, d_ih = d_inter * ih, d_inter * iw
    grad = np.empty_like(p)
    grad[:, 0] = d_iw * (diw_dx0 + diw_dx1)
    grad[:, 1] = d_ih * (dih_dy0 + dih_dy1)
    grad[:, 2] = d_iw * (diw_dx1 - diw_dx0) / 2 + d_areap * p[:, 3]
    grad[:, 3] = d_ih * (dih_dy1 - dih_dy0) / 2 + d_areap * p[:, 2]
    return out, grad


def assign_targets(targets: Sequence, grid: int) -> np.ndarray:
    """Positive cells: rows of ``image, row, col, class, cx, cy, w, h``.

    Each box goes to the cell holding its centre; when two boxes share a
    cell the larger one wins.
    """
    rows = []
    for n, boxes in enumerate(targets):
        arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
        if len(arr) == 0:
            continue
        taken: dict[tuple[int, int], np.ndarray] = {}
        for box in arr:
            i = min(int(box[2] * grid), grid - 1)
            j = min(int(box[1] * grid), grid - 1)
            prev = taken.get((i, j))
            if prev is None or box[3] * box[4] > prev[3] * prev[4]:
                taken[(i, j)] = box
        for (i, j), box in sorted(taken.items()):
            rows.append([n, i, j, *box])
    return np.array(rows, dtype=np.float64).reshape(-1, 8)


def encode_boxes(boxes: Sequence[LabeledBox], grid: int, num_classes: int, anchor: float = ANCHOR,
                 logit: float = 20.0) -> np.ndarray:
    """Ideal raw grid for a set of boxes (used to check decode/encode)."""
    out = np.zeros((grid, grid, 5 + num_classes))
    out[..., 0] = -logit
    out[..., 1:1 + num_classes] = -logit
    for _, i, j, c, cx, cy, w, h in assign_targets([boxes], grid):
        i, j = int(i), int(j)
        ox = np.clip(cx * grid - j, 1e-9, 1 - 1e-9)
        oy = np.clip(cy * grid - i, 1e-9, 1 - 1e-9)
        out[i, j, 0] = logit
        out[i, j, 1 + int(c)] = logit
        out[i, j, 1 + num_classes:] = [np.log(ox / (1 - ox)), np.log(oy / (1 - oy)), np.log(w / anchor), np.log(h / anchor)]
    return out


def _pred_boxes(t: np.ndarray, rows: np.ndarray, cols: np.ndarray, grid: int, anchor: float):
    sx, sy = nn.sigmoid(t[:, 0]), nn.sigmoid(t[:, 1])
    tw, th = np.clip(t[:, 2], -TW_CLIP, TW_CLIP), np.clip(t[:, 3], -TW_CLIP, TW_CLIP)
    boxes = np.stack([(cols + sx) / grid, (rows + sy) / grid, anchor * np.exp(tw), anchor * np.exp(th)], axis=1)
    # d box / d t, elementwise
    jac = np.stack([sx * (1 - sx) / grid, sy * (1 - sy) / grid,
                    boxes[:, 2] * (np.abs(t[:, 2]) < TW_CLIP), boxes[:, 3] * (np.abs(t[:, 3]) < TW_CLIP)], axis=1)
    return boxes, jac


def detection_loss(grid: np.ndarray, targets: Sequence, weights: LossWeights = LossWeights(),
                   anchor: float = ANCHOR) -> tuple[LossBreakdown, np.ndarray]:
    """Composite detection loss and its gradient w.r.t. the raw grid.

    ``grid`` is (N, S, S, 5+C) with ``targets`` a list of N box lists, or a
    single (S, S, 5+C) grid with one box list.
    """
    single = grid.ndim == 3
    if single:
        grid, targets = grid[None], [targets]
    if len(targets) != grid.shape[0]:
        raise ValueError(f"{grid.shape[0]} grids but {len(targets)} target lists")
    g = grid.astype(np.float64)
    n, s, _, ch = g.shape
    c = ch - 5
    dgrid = np.zeros_like(g)

    pos = assign_targets(targets, s)
    idx = tuple(pos[:, :3].astype(int).T) if len(pos) else None

    obj = g[..., 0]
    obj_t = np.zeros_like(obj)
    if idx is not None:
        obj_t[idx] = 1.0
    l_obj = float(nn.bce_with_logits(obj, obj_t).mean())
    dgrid[..., 0] = weights.obj * (nn.sigmoid(obj) - obj_t) / obj.size

    l_cls = l_box = 0.0
    if idx is not None:
        npos = len(pos)
        z = g[idx][:, 1:1 + c]
        y = np.zeros_like(z)
        y[np.arange(npos), pos[:, 3].astype(int)] = 1.0
        l_cls = float(nn.bce_with_logits(z, y).mean())
        dz = weights.cls * (nn.sigmoid(z) - y) / z.size

        t = g[idx][:, 1 + c:]
        pred, jac = _pred_boxes(t, pos[:, 1], pos[:, 2], s, anchor)
        ious, dpred = _iou_with_grad(pred, pos[:, 4:8])
        l_box = float(np.mean(1.0 - ious))
        dt = weights.box * (-dpred / npos) * jac

        cell_grad = np.zeros((npos, ch))
        cell_grad[:, 1:1 + c] = dz
        cell_grad[:, 1 + c:] = dt
        dgrid[idx] += cell_grad

    total = weights.box * l_box + weights.cls * l_cls + weights.obj * l_obj
    breakdown = LossBreakdown(l_box, l_cls, l_obj, total, weights)
    dgrid = dgrid.astype(grid.dtype, copy=False)
    return breakdown, (dgrid[0] if single else dgrid)


# ---------------------------------------------------------------- decoding

def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Class-wise greedy NMS; output is sorted by descending confidence."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
    boxes = np.array([[d.cx, d.cy, d.w, d.h] for d in dets])
    classes = np.array([d.class_id for d in dets])
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for k in order:
        if suppressed[k]:
            continue
        keep.append(dets[k])
        suppressed |= (classes == classes[k]) & (ious[k] > iou_threshold)
    return keep


def decode(grid: np.ndarray, conf_threshold: float = 0.4, nms_iou: float = 0.3,
           anchor: float = ANCHOR) -> list[Detection]:
    """Detections from one image's raw grid: threshold on confidence, then NMS."""
    if not (0 <= conf_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    g = np.asarray(grid, dtype=np.float64)
    s, c = g.shape[0], g.shape[-1] - 5
    cls_p = nn.sigmoid(g[..., 1:1 + c])
    conf = nn.sigmoid(g[..., 0]) * cls_p.max(axis=-1)
    rows, cols = np.nonzero(conf >= conf_threshold)
    if len(rows) == 0:
        return []
    boxes, _ = _pred_boxes(g[rows, cols, 1 + c:], rows, cols, s, anchor)
    x0 = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0, 1)
    x1 = np.clip(boxes[:, 0] + boxes[:, 2] / 2, 0, 1)
    y0 = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0, 1)
    y1 = np.clip(boxes[:, 1] + boxes[:, 3] / 2, 0, 1)
    labels = cls_p[rows, cols].argmax(axis=-1)
    dets = []
    for k in range(len(rows)):
        w, h = x1[k] - x0[k], y1[k] - y0[k]
        if w <= 0 or h <= 0:
            continue
        dets.append(Detection(int(labels[k]), float((x0[k] + x1[k]) / 2), float((y0[k] + y1[k]) / 2),
                              float(w), float(h), float(conf[rows[k], cols[k]])))
    return nms(dets, nms_iou)


def detect(params: ParamSet, images: np.ndarray, conf_threshold: float = 0.001, nms_iou: float = 0.5,
           batch_size: int = 64) -> list[list[Detection]]:
    grids = predict(params, images, batch_size)
    return [decode(g, conf_threshold, nms_iou) for g in grids]


# ---------------------------------------------------------------- optimisation

def sgd_step(params: ParamSet, grads: ParamSet, lr: float, momentum: float = 0.0,
             velocity: ParamSet | None = None, weight_decay: float = 0.0,
             step: int | None = None) -> tuple[ParamSet, ParamSet]:
    """Momentum SGD, ``v <- momentum * v + g``; ``p <- p - lr * v``.

    Pure: returns ``(new_params, new_velocity)`` and never mutates inputs.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name!r} at batch {step}")
    new_p: ParamSet = {}
    new_v: ParamSet = {}
    for name, p in params.items():
        g = grads[name]
        if weight_decay and p.ndim > 1:
            g = g + weight_decay * p
        v = g if velocity is None else momentum * velocity[name] + g
        new_v[name] = v.astype(p.dtype, copy=False)
        new_p[name] = (p - lr * v).astype(p.dtype, copy=False)
    return new_p, new_v


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    warmup_epochs: int = 2
    hflip: bool = True


def train_detector(pairs: Sequence[tuple[np.ndarray, Sequence[LabeledBox]]], cfg: DetectorConfig = DetectorConfig(),
                   train: TrainConfig = TrainConfig(), seed: int = 0,
                   weights: LossWeights = LossWeights(), init: ParamSet | None = None) -> tuple[ParamSet, list[float]]:
    """Supervised training on labelled pairs; returns params and per-epoch mean loss."""
    rng = np.random.default_rng(seed)
    params = init if init is not None else init_detector(cfg, seed)
    images = np.stack([p[0] for p in pairs]).astype(np.float32)
    labels = [boxes_to_array(p[1]) for p in pairs]
    n = len(pairs)
    nb = max(1, int(np.ceil(n / train.batch_size)))
    velocity = None
    trace = []
    step = 0
    for epoch in range(train.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(nb):
            idx = order[b * train.batch_size:(b + 1) * train.batch_size]
            x = images[idx]
            tgt = [labels[k].copy() for k in idx]
            if train.hflip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)
                for k in np.nonzero(flip)[0]:
                    if len(tgt[k]):
                        tgt[k][:, 1] = 1.0 - tgt[k][:, 1]
            grid, _, cache = forward_train(params, x)
            loss, dgrid = detection_loss(grid, tgt, weights, cfg.anchor)
            if not np.isfinite(loss.total):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            grads = backward(params, cache, dgrid * len(idx))
            warm = min(1.0, (step + 1) / max(1, train.warmup_epochs * nb))
            params, velocity = sgd_step(params, grads, train.lr * warm, train.momentum, velocity,
                                        train.weight_decay, step)
            losses.append(loss.total)
            step += 1
        trace.append(float(np.mean(losses)))
        log.info("train epoch %d loss %.4f", epoch, trace[-1])
    return params, trace
