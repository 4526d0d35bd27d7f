"""Greedy detection matching, all-points-interpolated AP and mAP at IoU 0.5."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sfdet.detector import iou_matrix


class EvaluationError(ValueError):
    pass


@dataclass
class MatchResult:
    """Per-detection outcome for one image, in the caller's detection order."""

    matched_gt: list[int | None]
    is_tp: list[bool]
    confidences: list[float]
    classes: list[int]
    gt_counts: dict[int, int] = field(default_factory=dict)


def _arr(boxes) -> np.ndarray:
    return np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)


def match_detections(dets: Sequence, gts: Sequence, iou_thr: float = 0.5) -> MatchResult:
    """Visit detections by descending confidence; each takes the highest-IoU
    still-unmatched ground truth of its class if that IoU reaches ``iou_thr``."""
    ious = iou_matrix(_arr(dets), _arr(gts)) if dets and gts else np.zeros((len(dets), len(gts)))
    gt_cls = np.array([g.class_id for g in gts], dtype=int)
    taken = np.zeros(len(gts), dtype=bool)
    matched: list[int | None] = [None] * len(dets)
    order = sorted(range(len(dets)), key=lambda k: -dets[k].confidence)
    for k in order:
        if not len(gts):
            break
        cand = np.where((gt_cls == dets[k].class_id) & ~taken, ious[k], -1.0)
        best = int(np.argmax(cand))
        if cand[best] >= iou_thr:
            matched[k] = best
            taken[best] = True
    counts: dict[int, int] = {}
    for c in gt_cls:
        counts[int(c)] = counts.get(int(c), 0) + 1
    return MatchResult(matched, [m is not None for m in matched], [float(d.confidence) for d in dets],
                       [int(d.class_id) for d in dets], counts)


def average_precision(matches: Sequence[MatchResult], class_id: int) -> float:
    """All-points interpolated AP for one class over many images.

    Returns NaN when the class has no ground truth.
    """
    n_gt = sum(m.gt_counts.get(class_id, 0) for m in matches)
    if n_gt == 0:
        return float("nan")
    conf, tp = [], []
    for m in matches:
        for c, t, k in zip(m.confidences, m.is_tp, m.classes):
            if k == class_id:
                conf.append(c)
                tp.append(t)
    if not conf:
        return 0.0
    order = np.argsort(-np.asarray(conf), kind="stable")
    tp_arr = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp_arr)
    cfp = np.cumsum(1.0 - tp_arr)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope, then sum over recall steps
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def per_class_ap(dets_per_image: Sequence[Sequence], gts_per_image: Sequence[Sequence],
                 iou_thr: float = 0.5) -> dict[int, float]:
    if len(dets_per_image) != len(gts_per_image):
        raise EvaluationError("detections and ground truths cover different numbers of images")
    matches = [match_detections(d, g, iou_thr) for d, g in zip(dets_per_image, gts_per_image)]
    classes = sorted({c for m in matches for c, n in m.gt_counts.items() if n > 0})
    return {c: average_precision(matches, c) for c in classes}


def map50(dets_per_image: Sequence[Sequence], gts_per_image: Sequence[Sequence]) -> float:
    """Mean AP at IoU 0.5 over classes that have at least one ground truth."""
    aps = per_class_ap(dets_per_image, gts_per_image, 0.5)
    if not aps:
        raise EvaluationError("no ground-truth boxes: mAP is undefined")
    return float(np.mean(list(aps.values())))
