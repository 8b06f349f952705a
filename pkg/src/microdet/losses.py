"""Box similarity (IoU, CIoU, NWD), anchor assignment and the training loss.

Boxes are ``(cx, cy, w, h)``. Everything that feeds the loss is in pixels of
the decoded prediction space; the label files are normalised and converted
at the data boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, no_grad

ANCHOR_RATIO = 4.0
NEIGHBOR_FRAC = 0.5
CIOU_EPS = 1e-9


class BBox(NamedTuple):
    """Axis-aligned box as centre and size; ``unit`` names the coordinate space."""

    cx: float
    cy: float
    w: float
    h: float
    unit: str = "px"


def _as_boxes(b) -> np.ndarray:
    if isinstance(b, BBox):
        return np.array(b[:4], dtype=np.float64)
    return np.asarray(b, dtype=np.float64)[..., :4]


# -- tensor formulas (shared by the loss and the scalar API) ---------------------

def _cols(t: Tensor):
    return [ops.index(t, (Ellipsis, i)) for i in range(4)]


def iou_t(a: Tensor, b: Tensor, union_eps: float = 0.0) -> Tensor:
    ax, ay, aw, ah = _cols(a)
    bx, by, bw, bh = _cols(b)
    iw = ops.clamp(ops.minimum(ax + aw * 0.5, bx + bw * 0.5) - ops.maximum(ax - aw * 0.5, bx - bw * 0.5), 0.0)
    ih = ops.clamp(ops.minimum(ay + ah * 0.5, by + bh * 0.5) - ops.maximum(ay - ah * 0.5, by - bh * 0.5), 0.0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union_eps:
        union = union + union_eps
    return inter / union


def ciou_t(a: Tensor, b: Tensor, union_eps: float = 0.0) -> Tensor:
    """IoU minus normalised centre distance minus the weighted aspect term."""
    ax, ay, aw, ah = _cols(a)
    bx, by, bw, bh = _cols(b)
    iou = iou_t(a, b, union_eps)
    cw = ops.maximum(ax + aw * 0.5, bx + bw * 0.5) - ops.minimum(ax - aw * 0.5, bx - bw * 0.5)
    ch = ops.maximum(ay + ah * 0.5, by + bh * 0.5) - ops.minimum(ay - ah * 0.5, by - bh * 0.5)
    c2 = cw * cw + ch * ch + CIOU_EPS
    rho2 = (bx - ax) * (bx - ax) + (by - ay) * (by - ay)
    dv = ops.arctan(bw / (bh + CIOU_EPS)) - ops.arctan(aw / (ah + CIOU_EPS))
    v = dv * dv * (4.0 / math.pi ** 2)
    alpha = v / (v - iou + (1.0 + CIOU_EPS))
    return iou - (rho2 / c2 + v * alpha)


def wasserstein2_t(a: Tensor, b: Tensor) -> Tensor:
    """Squared 2-Wasserstein distance between the Gaussians fitted to two boxes."""
    ax, ay, aw, ah = _cols(a)
    bx, by, bw, bh = _cols(b)
    dw = aw * 0.5 - bw * 0.5
    dh = ah * 0.5 - bh * 0.5
    return (ax - bx) * (ax - bx) + (ay - by) * (ay - by) + dw * dw + dh * dh


def nwd_t(a: Tensor, b: Tensor, c: float = 12.8) -> Tensor:
    # sqrt uses a zero subgradient at W2 == 0 so identical boxes stay finite
    return ops.exp(ops.sqrt(wasserstein2_t(a, b), eps=1e-12) * (-1.0 / c))


def _scalar(fn, a, b, **kw):
    a, b = _as_boxes(a), _as_boxes(b)
    with no_grad():
        out = fn(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), **kw).data
    return float(out) if out.ndim == 0 else out


def iou(a, b) -> float:
    """Intersection over union; accepts BBox, 4-sequences or (..., 4) arrays."""
    return _scalar(iou_t, a, b)


def ciou(a, b) -> float:
    return _scalar(ciou_t, a, b)


def nwd(a, b, c: float = 12.8) -> float:
    """``exp(-sqrt(W2) / c)``; exactly 1 for identical boxes."""
    if c <= 0:
        raise ValueError("NWD constant C must be positive")
    return _scalar(nwd_t, a, b, c=c)


# -- encode / decode ---------------------------------------------------------------

def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def encode(box_px, cell_xy, anchor_wh, stride):
    """Raw (tx, ty, tw, th) that decode exactly to ``box_px`` from the given cell/anchor.

    Valid when the centre offset lies in (-0.5, 1.5) cells and ``w / anchor_w``
    in (0, 4); outside that range the decode map cannot reach the box.
    """
    box = np.asarray(box_px, dtype=np.float64)
    cell = np.asarray(cell_xy, dtype=np.float64)
    anchor = np.asarray(anchor_wh, dtype=np.float64)
    off = box[..., :2] / stride - cell
    ratio = box[..., 2:4] / anchor
    if np.any(off <= -0.5) or np.any(off >= 1.5):
        raise ValueError("centre offset outside the (-0.5, 1.5) cell range the decoder can express")
    if np.any(ratio <= 0) or np.any(ratio >= 4.0):
        raise ValueError("size ratio outside the (0, 4) range the decoder can express")
    txy = _logit((off + 0.5) / 2.0)
    twh = _logit(np.sqrt(ratio) / 2.0)
    return np.concatenate([txy, twh], axis=-1)


def decode_boxes(t: np.ndarray, cell_xy, anchor_wh, stride) -> np.ndarray:
    """Numpy decode of raw (..., 4) logits to pixel (cx, cy, w, h)."""
    s = ops._sigmoid(np.asarray(t, dtype=np.float64))
    xy = (2.0 * s[..., :2] - 0.5 + np.asarray(cell_xy, dtype=np.float64)) * stride
    wh = (2.0 * s[..., 2:4]) ** 2 * np.asarray(anchor_wh, dtype=np.float64)
    return np.concatenate([xy, wh], axis=-1)


# -- assignment ----------------------------------------------------------------------

@dataclass
class ScaleTargets:
    b: np.ndarray        # image index
    a: np.ndarray        # anchor index within the scale
    gy: np.ndarray
    gx: np.ndarray
    offsets: np.ndarray  # (P, 2) centre offset from the cell corner, in cells
    box: np.ndarray      # (P, 4) ground-truth box in pixels
    cls: np.ndarray
    gt: np.ndarray       # index into the flattened ground-truth list

    def __len__(self):
        return len(self.b)

    def keys(self):
        return {(int(b), int(a), int(y), int(x), int(g))
                for b, a, y, x, g in zip(self.b, self.a, self.gy, self.gx, self.gt)}


@dataclass
class AssignedTargets:
    scales: List[ScaleTargets]
    n_gt: int
    unassigned: int

    @property
    def total(self) -> int:
        return sum(len(s) for s in self.scales)


def flatten_gts(batch_gts: Sequence[np.ndarray]) -> np.ndarray:
    """List of per-image (K, 5) [cls, cx, cy, w, h] pixel arrays -> (M, 6) with image index first."""
    rows = [np.concatenate([np.full((len(g), 1), i, dtype=np.float64), np.asarray(g, dtype=np.float64).reshape(-1, 5)], axis=1)
            for i, g in enumerate(batch_gts)]
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 6))


def assign(gts: np.ndarray, anchors: np.ndarray, strides: Sequence[int], grids: Sequence[int]) -> AssignedTargets:
    """Match ground truths to (scale, anchor, cell) slots.

    ``gts`` is (M, 6) ``[img, cls, cx, cy, w, h]`` in pixels; ``anchors`` is
    (S, A, 2) in pixels. A gt matches anchor k at scale s when its worst
    side ratio against the anchor is below 4. Each match claims its own cell
    plus the horizontally and vertically nearer neighbour cells, when the
    centre sits in the near half of the cell and the neighbour is inside the grid.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 6)
    anchors = np.asarray(anchors, dtype=np.float64)
    matched_any = np.zeros(len(gts), dtype=bool)
    scales = []
    for s, (stride, grid) in enumerate(zip(strides, grids)):
        na = anchors.shape[1]
        gidx = np.repeat(np.arange(len(gts)), na)
        aidx = np.tile(np.arange(na), len(gts))
        g = gts[gidx]
        ratio = g[:, 4:6] / anchors[s][aidx]
        worst = np.maximum(ratio, 1.0 / ratio).max(axis=1)
        keep = worst < ANCHOR_RATIO
        gidx, aidx, g = gidx[keep], aidx[keep], g[keep]
        matched_any[gidx] = True

        gxy = g[:, 2:4] / stride
        gxi = grid - gxy
        frac, frac_i = gxy % 1.0, gxi % 1.0
        cands = [np.zeros((len(g), 2))]
        masks = [np.ones(len(g), dtype=bool)]
        # (dx, dy) of the neighbour cell and the condition that selects it
        for off, m in (((-1, 0), (frac[:, 0] < NEIGHBOR_FRAC) & (gxy[:, 0] > 1.0)),
                       ((0, -1), (frac[:, 1] < NEIGHBOR_FRAC) & (gxy[:, 1] > 1.0)),
                       ((1, 0), (frac_i[:, 0] < NEIGHBOR_FRAC) & (gxi[:, 0] > 1.0)),
                       ((0, 1), (frac_i[:, 1] < NEIGHBOR_FRAC) & (gxi[:, 1] > 1.0))):
            cands.append(np.broadcast_to(np.array(off, dtype=np.float64), (len(g), 2)))
            masks.append(m)
        rows_b, rows_a, rows_y, rows_x, rows_off, rows_box, rows_cls, rows_gt = ([] for _ in range(8))
        for off, m in zip(cands, masks):
            if not m.any():
                continue
            cell = np.floor(gxy[m]) + off[m]
            cell = np.clip(cell, 0, grid - 1)
            rows_b.append(g[m, 0].astype(np.int64))
            rows_a.append(aidx[m])
            rows_x.append(cell[:, 0].astype(np.int64))
            rows_y.append(cell[:, 1].astype(np.int64))
            rows_off.append(gxy[m] - cell)
            rows_box.append(g[m, 2:6])
            rows_cls.append(g[m, 1].astype(np.int64))
            rows_gt.append(gidx[m])
        if rows_b:
            scales.append(ScaleTargets(*(np.concatenate(r) for r in (rows_b, rows_a, rows_y, rows_x)),
                                       np.concatenate(rows_off), np.concatenate(rows_box),
                                       np.concatenate(rows_cls), np.concatenate(rows_gt)))
        else:
            empty_i = np.zeros(0, dtype=np.int64)
            scales.append(ScaleTargets(empty_i, empty_i, empty_i, empty_i, np.zeros((0, 2)), np.zeros((0, 4)),
                                       empty_i, empty_i))
    return AssignedTargets(scales, len(gts), int((~matched_any).sum()))


# -- composite loss ----------------------------------------------------------------

@dataclass
class LossConfig:
    nwd: bool = False
    nwd_c: Optional[float] = None  # None: resolve from the training boxes, see mean_box_size
    nwd_weight: float = 1.0        # share of NWD in the similarity when nwd is on
    box_weight: float = 1.0         # 0.05 starves localisation at 64 px
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    balance: tuple = (4.0, 1.0, 0.4)


@dataclass
class LossBreakdown:
    total: Tensor
    box: float
    obj: float
    cls: float
    sim: List[np.ndarray] = field(default_factory=list)

    def as_dict(self) -> Dict[str, float]:
        return {"loss": float(self.total.data), "box": self.box, "obj": self.obj, "cls": self.cls}


def mean_box_size(gts_px: Sequence[np.ndarray]) -> float:
    """Mean sqrt(w * h) in pixels over per-image (K, 5) pixel gt arrays.

    This is the usual choice for the NWD constant C: the mean absolute
    object size of the dataset.
    """
    wh = [np.asarray(g, dtype=np.float64).reshape(-1, 5)[:, 3:5] for g in gts_px]
    wh = np.concatenate(wh, axis=0) if wh else np.zeros((0, 2))
    if len(wh) == 0:
        raise ValueError("no ground-truth boxes to derive the NWD constant from")
    return float(np.mean(np.sqrt(wh[:, 0] * wh[:, 1])))


def composite_loss(raw: Sequence[Tensor], targets: AssignedTargets, anchors: np.ndarray, strides: Sequence[int],
                   n_classes: int, cfg: Optional[LossConfig] = None,
                   frozen_sim: Optional[Sequence[np.ndarray]] = None) -> LossBreakdown:
    """Box + objectness + class loss over the three raw head outputs.

    The objectness target at each positive slot is the detached box
    similarity, clipped to [0, 1]. ``frozen_sim`` replaces that target with
    given arrays (one per scale), which makes the loss a fixed function of
    ``raw`` for finite-difference checks.
    """
    cfg = cfg or LossConfig()
    dtype = raw[0].dtype
    nout = 5 + n_classes
    box_terms, cls_terms = [], []
    obj_total = None
    sims = []
    for s, (p, st) in enumerate(zip(raw, targets.scales)):
        n, _, h, w = p.shape
        pr = ops.reshape(p, (n, 3, nout, h, w))
        tobj = np.zeros((n, 3, h, w), dtype=dtype)
        if len(st):
            ps = ops.index(pr, (st.b, st.a, slice(None), st.gy, st.gx))           # (P, nout)
            sig = ops.sigmoid(ops.index(ps, (slice(None), slice(0, 4))))
            cell = np.stack([st.gx, st.gy], axis=1).astype(dtype)
            pxy = (ops.index(sig, (slice(None), slice(0, 2))) * 2.0 - 0.5 + cell) * float(strides[s])
            pwh = ops.index(sig, (slice(None), slice(2, 4))) * 2.0
            pwh = pwh * pwh * anchors[s][st.a].astype(dtype)
            pbox = ops.concat([pxy, pwh], axis=1)
            tbox = Tensor(st.box.astype(dtype))
            sim = ciou_t(pbox, tbox, union_eps=CIOU_EPS)
            if cfg.nwd:
                if cfg.nwd_c is None:
                    raise ValueError("LossConfig.nwd_c is unresolved; pass a number or use mean_box_size()")
                sim_n = nwd_t(pbox, tbox, cfg.nwd_c)
                sim = sim_n if cfg.nwd_weight == 1.0 else sim_n * cfg.nwd_weight + sim * (1.0 - cfg.nwd_weight)
            box_terms.append(1.0 - sim)
            target_sim = np.asarray(frozen_sim[s]) if frozen_sim is not None else np.clip(sim.data, 0.0, 1.0)
            sims.append(target_sim)
            tobj[st.b, st.a, st.gy, st.gx] = target_sim
            tcls = np.zeros((len(st), n_classes), dtype=dtype)
            tcls[np.arange(len(st)), st.cls] = 1.0
            cls_terms.append((ops.index(ps, (slice(None), slice(5, nout))), tcls))
        else:
            sims.append(np.zeros(0, dtype=dtype))
        obj_logits = ops.index(pr, (slice(None), slice(None), 4))
        term = ops.bce_with_logits(obj_logits, tobj) * cfg.balance[s]
        obj_total = term if obj_total is None else obj_total + term

    if box_terms:
        lbox = ops.mean_over(ops.concat(box_terms, axis=0))
        logits = ops.concat([c[0] for c in cls_terms], axis=0)
        lcls = ops.bce_with_logits(logits, np.concatenate([c[1] for c in cls_terms], axis=0))
    else:
        lbox = Tensor(np.zeros((), dtype=dtype))
        lcls = Tensor(np.zeros((), dtype=dtype))
    total = lbox * cfg.box_weight + obj_total * cfg.obj_weight + lcls * cfg.cls_weight
    return LossBreakdown(total, float(lbox.data), float(obj_total.data), float(lcls.data), sims)
