"""Detection metrics: greedy matching, precision/recall, all-point AP, mAP@0.5."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) cx,cy,w,h boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1, ax2, ay2 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2, a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1, bx2, by2 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(ax1[:, None], bx1[None]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(ay1[:, None], by1[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def confidence_order(scores: np.ndarray) -> np.ndarray:
    """Descending confidence; equal confidences keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match(det_boxes, det_scores, det_classes, gt_boxes, gt_classes, iou_threshold: float = 0.5):
    """Greedy one-image matching.

    Returns ``(tp, gt_matched)``: a bool flag per detection (input order)
    and per ground truth. Each detection, highest confidence first, takes
    the unmatched same-class gt of highest IoU (lowest index on ties)
    provided IoU >= threshold.
    """
    det_classes = np.asarray(det_classes).reshape(-1)
    gt_classes = np.asarray(gt_classes).reshape(-1)
    tp = np.zeros(len(det_classes), dtype=bool)
    matched = np.zeros(len(gt_classes), dtype=bool)
    if len(det_classes) == 0 or len(gt_classes) == 0:
        return tp, matched
    ious = iou_matrix(det_boxes, gt_boxes)
    for d in confidence_order(det_scores):
        ok = (gt_classes == det_classes[d]) & ~matched & (ious[d] >= iou_threshold)
        if not ok.any():
            continue
        cand = np.where(ok, ious[d], -1.0)
        g = int(np.argmax(cand))           # argmax returns the first maximum
        matched[g] = True
        tp[d] = True
    return tp, matched


def precision_recall(tp: int, fp: int, fn: int):
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    return p, r


@dataclass
class PrCurve:
    precision: np.ndarray
    recall: np.ndarray
    confidence: np.ndarray
    n_gt: int


def pr_curve(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> PrCurve:
    order = confidence_order(scores)
    tp = np.asarray(tp, dtype=bool)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    k = np.arange(1, len(tp) + 1)
    precision = ctp / k if len(tp) else np.zeros(0)
    recall = ctp / n_gt if n_gt > 0 else np.zeros(len(tp))
    return PrCurve(precision, recall, np.asarray(scores, dtype=np.float64)[order], n_gt)


def average_precision(curve: PrCurve) -> Optional[float]:
    """Exact area under the monotone precision envelope; ``None`` when the class has no gts."""
    if curve.n_gt == 0:
        return None
    if len(curve.recall) == 0:
        return 0.0
    env = np.maximum.accumulate(curve.precision[::-1])[::-1]
    r = np.concatenate([[0.0], curve.recall])
    steps = np.diff(r)
    return math.fsum(steps * env)


@dataclass
class EvalReport:
    ap: List[Optional[float]]
    map50: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    n_classes: int
    conf_thresh: float
    iou_thresh: float = 0.5
    curves: List[PrCurve] = field(default_factory=list, repr=False)

    CSV_HEADER = "map50,precision,recall,tp,fp,fn"

    def csv_row(self) -> str:
        return f"{self.map50:.6f},{self.precision:.6f},{self.recall:.6f},{self.tp},{self.fp},{self.fn}"


def evaluate(detections: Sequence, ground_truths: Sequence[np.ndarray], n_classes: int,
             conf_thresh: float = 0.25, iou_thresh: float = 0.5) -> EvalReport:
    """Score per-image detections against per-image gts.

    ``detections[i]`` has ``boxes`` (K,4), ``scores`` (K,), ``classes`` (K,);
    ``ground_truths[i]`` is (G,5) ``[class, cx, cy, w, h]`` in the same unit.
    AP uses every detection; P/R/TP/FP/FN count detections with
    confidence strictly above ``conf_thresh``.
    """
    if len(ground_truths) == 0:
        raise ValueError("cannot evaluate an empty split")
    if len(detections) != len(ground_truths):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truths)} images")
    all_scores, all_tp, all_cls = [], [], []
    n_gt = np.zeros(n_classes, dtype=np.int64)
    for det, gt in zip(detections, ground_truths):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 5)
        gcls = gt[:, 0].astype(np.int64)
        n_gt += np.bincount(gcls, minlength=n_classes)[:n_classes]
        tp, _ = match(det.boxes, det.scores, det.classes, gt[:, 1:], gcls, iou_thresh)
        all_scores.append(np.asarray(det.scores, dtype=np.float64))
        all_tp.append(tp)
        all_cls.append(np.asarray(det.classes, dtype=np.int64))
    scores = np.concatenate(all_scores)
    tps = np.concatenate(all_tp)
    classes = np.concatenate(all_cls)

    aps, curves = [], []
    for c in range(n_classes):
        m = classes == c
        curve = pr_curve(scores[m], tps[m], int(n_gt[c]))
        curves.append(curve)
        aps.append(average_precision(curve))
    defined = [a for a in aps if a is not None]
    map50 = float(np.mean(defined)) if defined else 0.0

    keep = scores > conf_thresh
    tp = int(tps[keep].sum())
    fp = int(keep.sum()) - tp
    fn = int(n_gt.sum()) - tp
    p, r = precision_recall(tp, fp, fn)
    return EvalReport(aps, map50, p, r, tp, fp, fn, n_classes, conf_thresh, iou_thresh, curves)


def format_ap(ap: Optional[float]) -> str:
    return "undefined" if ap is None or (isinstance(ap, float) and math.isnan(ap)) else f"{ap:.6f}"
