"""Configurable three-scale anchor detector.

The four ablation toggles:

* ``ghost``     - backbone downsampling convs and C3 bottlenecks become ghost modules
* ``repgfpn``   - the PAN neck with C3 fusion becomes a GFPN-style neck of FC blocks
* ``attention`` - coordinate attention on the three backbone outputs and a
  one-layer transformer encoder in front of each head
* ``nwd``       - box regression and objectness use NWD instead of CIoU
  (consumed by the loss; carried here so a config names a full ablation row)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import kernels, ops
from .errors import ConfigError, ShapeError, StateError
from .nn import C3, CBS, SPPF, CoordAttention, FCBlock, GhostConv, GhostSpec, Module, TransformerEncoder, rep_modules
from .nn.layers import Conv2d
from .rng import Rng
from .tensor import Tensor, no_grad

STRIDES = (8, 16, 32)
BASE_WIDTHS = (16, 32, 64, 128, 128)   # stride 2, 4, 8, 16, 32

# anchors as fractions of the image side, 3 scales x 3 (w, h), ascending area
ANCHOR_FRACTIONS = (
    ((0.04, 0.04), (0.0625, 0.0625), (0.09, 0.05)),
    ((0.06, 0.11), (0.11, 0.06), (0.11, 0.11)),
    ((0.16, 0.09), (0.09, 0.16), (0.17, 0.17)),
)


def default_anchors(img_size: int) -> np.ndarray:
    return np.asarray(ANCHOR_FRACTIONS, dtype=np.float64) * img_size


@dataclass
class ModelConfig:
    img_size: int = 64
    n_classes: int = 2
    width_scale: float = 1.0
    depth_scale: float = 1.0
    ghost: bool = False
    repgfpn: bool = False
    attention: bool = False
    nwd: bool = False
    anchors: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.anchors is None:
            self.anchors = default_anchors(self.img_size)
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.img_size <= 0 or self.img_size % 32:
            raise ConfigError(f"img_size must be a positive multiple of 32, got {self.img_size}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.width_scale <= 0 or self.depth_scale <= 0:
            raise ConfigError("width_scale and depth_scale must be positive")
        a = self.anchors
        if a.shape != (3, 3, 2):
            raise ConfigError(f"anchors must have shape (3, 3, 2), got {a.shape}")
        if not np.all(a > 0):
            raise ConfigError("anchor sizes must be positive")
        for s in range(3):
            area = a[s, :, 0] * a[s, :, 1]
            if np.any(np.diff(area) < 0):
                raise ConfigError(f"anchors of scale {s} are not sorted ascending by area")

    @property
    def toggles(self) -> str:
        return "".join("1" if t else "0" for t in (self.ghost, self.repgfpn, self.attention, self.nwd))

    @property
    def strides(self):
        return STRIDES

    @property
    def grids(self):
        return tuple(self.img_size // s for s in STRIDES)

    def with_toggles(self, bits: str) -> "ModelConfig":
        g, r, a, n = (b == "1" for b in bits)
        return replace(self, ghost=g, repgfpn=r, attention=a, nwd=n, anchors=self.anchors.copy())

    def to_dict(self) -> dict:
        return {
            "img_size": self.img_size, "n_classes": self.n_classes, "width_scale": self.width_scale,
            "depth_scale": self.depth_scale, "ghost": self.ghost, "repgfpn": self.repgfpn,
            "attention": self.attention, "nwd": self.nwd,
            "anchors": " ".join(repr(float(v)) for v in self.anchors.reshape(-1)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        anchors = d.get("anchors")
        if isinstance(anchors, str):
            anchors = np.array([float(v) for v in anchors.split()]).reshape(3, 3, 2)

        def flag(v):
            return v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")

        return cls(img_size=int(d["img_size"]), n_classes=int(d["n_classes"]),
                   width_scale=float(d["width_scale"]), depth_scale=float(d["depth_scale"]),
                   ghost=flag(d["ghost"]), repgfpn=flag(d["repgfpn"]), attention=flag(d["attention"]),
                   nwd=flag(d["nwd"]), anchors=anchors)


def _width(c: int, scale: float) -> int:
    # multiples of 8 keep transformer heads and ghost halves integral
    return max(8, int(math.ceil(c * scale / 8.0)) * 8)


@dataclass
class Detections:
    """Per-image detections; boxes are pixel (cx, cy, w, h)."""

    boxes: np.ndarray
    scores: np.ndarray
    classes: np.ndarray

    def __len__(self):
        return len(self.scores)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        super().__init__()
        w = [_width(c, cfg.width_scale) for c in BASE_WIDTHS]
        n = max(1, int(round(cfg.depth_scale)))
        self.widths = w
        self.stem = CBS(3, w[0], 3, 2, rng=rng.spawn(0))
        self.ghost = cfg.ghost
        for i in range(1, 5):
            if cfg.ghost:
                down = GhostConv(GhostSpec(w[i - 1], w[i], 2, 3, 3, 2), rng=rng.spawn(i, 0))
                setattr(self, f"ghost_down{i}", down)
                setattr(self, f"ghost_c3_{i}", C3(w[i], w[i], n, ghost=True, rng=rng.spawn(i, 1)))
            else:
                setattr(self, f"down{i}", CBS(w[i - 1], w[i], 3, 2, rng=rng.spawn(i, 0)))
                setattr(self, f"c3_{i}", C3(w[i], w[i], n, rng=rng.spawn(i, 1)))
        self.sppf = SPPF(w[4], w[4], 5, rng=rng.spawn(5))

    def stage(self, i: int, x: Tensor) -> Tensor:
        pre = "ghost_" if self.ghost else ""
        x = getattr(self, f"{pre}down{i}")(x)
        return getattr(self, f"{pre}c3_{i}")(x)

    def forward(self, x: Tensor):
        x = self.stem(x)
        x = self.stage(1, x)
        p3 = self.stage(2, x)
        p4 = self.stage(3, p3)
        p5 = self.sppf(self.stage(4, p4))
        return p3, p4, p5


class PanNeck(Module):
    """FPN top-down then PAN bottom-up, with C3 fusion nodes."""

    def __init__(self, c3: int, c4: int, c5: int, n: int, rng: Rng):
        super().__init__()
        self.lat5 = CBS(c5, c4, 1, rng=rng.spawn(0))
        self.td4 = C3(2 * c4, c4, n, shortcut=False, rng=rng.spawn(1))
        self.lat4 = CBS(c4, c3, 1, rng=rng.spawn(2))
        self.out3 = C3(2 * c3, c3, n, shortcut=False, rng=rng.spawn(3))
        self.down3 = CBS(c3, c3, 3, 2, rng=rng.spawn(4))
        self.out4 = C3(2 * c3, c4, n, shortcut=False, rng=rng.spawn(5))
        self.down4 = CBS(c4, c4, 3, 2, rng=rng.spawn(6))
        self.out5 = C3(2 * c4, c5, n, shortcut=False, rng=rng.spawn(7))

    def forward(self, p3, p4, p5):
        h5 = self.lat5(p5)
        t4 = self.td4(ops.concat([ops.upsample_nearest(h5, 2), p4], axis=1))
        h4 = self.lat4(t4)
        o3 = self.out3(ops.concat([ops.upsample_nearest(h4, 2), p3], axis=1))
        o4 = self.out4(ops.concat([self.down3(o3), h4], axis=1))
        o5 = self.out5(ops.concat([self.down4(o4), h5], axis=1))
        return o3, o4, o5


class RepGfpnNeck(Module):
    """One top-down and one bottom-up pass of FC fusion nodes.

    Top-down P4 node sees P4, upsampled P5 and downsampled P3; the P3 node
    sees P3 and the upsampled P4 node. Bottom-up nodes see their top-down
    (or backbone) map, the downsampled shallower output and a backbone skip.
    """

    def __init__(self, c3: int, c4: int, c5: int, rng: Rng, depth: int = 2):
        super().__init__()
        self.gdown3_td = CBS(c3, c3, 3, 2, rng=rng.spawn(0))
        self.fc_td4 = FCBlock(c4 + c5 + c3, c4, depth, rng=rng.spawn(1))
        self.fc_out3 = FCBlock(c3 + c4, c3, depth, rng=rng.spawn(2))
        self.gdown3_bu = CBS(c3, c3, 3, 2, rng=rng.spawn(3))
        self.fc_out4 = FCBlock(c4 + c3 + c4, c4, depth, rng=rng.spawn(4))
        self.gdown4_bu = CBS(c4, c4, 3, 2, rng=rng.spawn(5))
        self.fc_out5 = FCBlock(c5 + c4, c5, depth, rng=rng.spawn(6))

    def forward(self, p3, p4, p5):
        t4 = self.fc_td4([p4, ops.upsample_nearest(p5, 2), self.gdown3_td(p3)])
        o3 = self.fc_out3([p3, ops.upsample_nearest(t4, 2)])
        o4 = self.fc_out4([t4, self.gdown3_bu(o3), p4])
        o5 = self.fc_out5([p5, self.gdown4_bu(o4)])
        return o3, o4, o5


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        rng = Rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng.spawn(0))
        w = self.backbone.widths
        c3, c4, c5 = w[2], w[3], w[4]
        n = max(1, int(round(cfg.depth_scale)))
        if cfg.repgfpn:
            self.neck = RepGfpnNeck(c3, c4, c5, rng.spawn(1))
        else:
            self.neck = PanNeck(c3, c4, c5, n, rng.spawn(1))
        if cfg.attention:
            self.ca3 = CoordAttention(c3, 16, rng=rng.spawn(2, 0))
            self.ca4 = CoordAttention(c4, 16, rng=rng.spawn(2, 1))
            self.ca5 = CoordAttention(c5, 16, rng=rng.spawn(2, 2))
            for i, (c, g) in enumerate(zip((c3, c4, c5), cfg.grids)):
                setattr(self, f"xformer{i + 3}", TransformerEncoder(c, g * g, heads=4, mlp_ratio=2.0, layers=1,
                                                                    rng=rng.spawn(3, i)))
        nout = 3 * (5 + cfg.n_classes)
        for i, c in enumerate((c3, c4, c5)):
            # plain init like every other conv: no objectness prior on the bias
            setattr(self, f"head{i + 3}", Conv2d(c, nout, 1, bias=True, rng=rng.spawn(4, i)))

    @property
    def anchors(self) -> np.ndarray:
        return self.cfg.anchors

    def forward(self, images) -> List[Tensor]:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"detector input must be (N, 3, H, W), got {x.shape}")
        s = self.cfg.img_size
        if x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"detector expects {s}x{s} images, got {x.shape[2]}x{x.shape[3]}")
        p3, p4, p5 = self.backbone(x)
        if self.cfg.attention:
            p3, p4, p5 = self.ca3(p3), self.ca4(p4), self.ca5(p5)
        feats = self.neck(p3, p4, p5)
        outs = []
        for i, f in enumerate(feats):
            if self.cfg.attention:
                f = getattr(self, f"xformer{i + 3}")(f)
            outs.append(getattr(self, f"head{i + 3}")(f))
        return outs

    def count_macs(self, batch: int = 1) -> int:
        x = Tensor(np.zeros((batch, 3, self.cfg.img_size, self.cfg.img_size), dtype=np.float32))
        with no_grad(), ops.count_macs() as c:
            self.forward(x)
        return c.total

    def backbone_macs(self) -> int:
        x = Tensor(np.zeros((1, 3, self.cfg.img_size, self.cfg.img_size), dtype=np.float32))
        with no_grad(), ops.count_macs() as c:
            self.backbone(x)
        return c.total


def build(cfg: ModelConfig, seed: int = 0) -> Detector:
    return Detector(cfg, seed)


def reparameterize(model: Detector) -> Detector:
    """Fuse every RepConvN in place; the model must be in eval mode."""
    if model.training:
        raise StateError("reparameterize() needs an eval-mode model")
    for m in rep_modules(model):
        m.fuse()
    return model


def is_deployed(model: Module) -> bool:
    return any(m.deployed for m in rep_modules(model))


# -- decoding --------------------------------------------------------------------------

def decode(raw: Sequence, cfg: ModelConfig, conf_thresh: float = 0.25, iou_thresh: float = 0.45,
           max_det: int = 100, pre_nms: int = 1000) -> List[Detections]:
    """Turn raw head outputs into per-image detections (pixel cx, cy, w, h)."""
    if not (0.0 <= conf_thresh <= 1.0 and 0.0 <= iou_thresh <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    arrays = [r.data if isinstance(r, Tensor) else np.asarray(r) for r in raw]
    n = arrays[0].shape[0]
    nc = cfg.n_classes
    per_img_boxes = [[] for _ in range(n)]
    per_img_scores = [[] for _ in range(n)]
    per_img_cls = [[] for _ in range(n)]
    for s, arr in enumerate(arrays):
        _, _, h, w = arr.shape
        p = ops._sigmoid(arr.astype(np.float64).reshape(n, 3, 5 + nc, h, w))
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        stride = STRIDES[s]
        cx = (2.0 * p[:, :, 0] - 0.5 + gx) * stride
        cy = (2.0 * p[:, :, 1] - 0.5 + gy) * stride
        aw = cfg.anchors[s][:, 0][None, :, None, None]
        ah = cfg.anchors[s][:, 1][None, :, None, None]
        bw = (2.0 * p[:, :, 2]) ** 2 * aw
        bh = (2.0 * p[:, :, 3]) ** 2 * ah
        cls_p = p[:, :, 5:]
        best = cls_p.argmax(axis=2)
        conf = p[:, :, 4] * cls_p.max(axis=2)
        for b in range(n):
            m = conf[b] > conf_thresh
            if not m.any():
                continue
            per_img_boxes[b].append(np.stack([cx[b][m], cy[b][m], bw[b][m], bh[b][m]], axis=1))
            per_img_scores[b].append(conf[b][m])
            per_img_cls[b].append(best[b][m])
    size = float(cfg.img_size)
    out = []
    for b in range(n):
        if not per_img_scores[b]:
            out.append(Detections.empty())
            continue
        boxes = np.concatenate(per_img_boxes[b])
        scores = np.concatenate(per_img_scores[b])
        classes = np.concatenate(per_img_cls[b]).astype(np.int64)
        order = np.argsort(-scores, kind="stable")[:pre_nms]
        boxes, scores, classes = boxes[order], scores[order], classes[order]
        xyxy = np.clip(np.stack([boxes[:, 0] - boxes[:, 2] / 2, boxes[:, 1] - boxes[:, 3] / 2,
                                 boxes[:, 0] + boxes[:, 2] / 2, boxes[:, 1] + boxes[:, 3] / 2], axis=1), 0.0, size)
        valid = (xyxy[:, 2] > xyxy[:, 0]) & (xyxy[:, 3] > xyxy[:, 1])
        xyxy, scores, classes = xyxy[valid], scores[valid], classes[valid]
        keep_all = []
        for c in np.unique(classes):
            idx = np.nonzero(classes == c)[0]
            kept = kernels.nms(xyxy[idx], np.arange(len(idx)), iou_thresh)
            keep_all.append(idx[kept])
        keep = np.sort(np.concatenate(keep_all)) if keep_all else np.zeros(0, dtype=np.int64)
        keep = keep[np.argsort(-scores[keep], kind="stable")][:max_det]
        k = xyxy[keep]
        boxes = np.stack([(k[:, 0] + k[:, 2]) / 2, (k[:, 1] + k[:, 3]) / 2, k[:, 2] - k[:, 0], k[:, 3] - k[:, 1]], axis=1)
        out.append(Detections(boxes, scores[keep], classes[keep]))
    return out


def predict(model: Detector, images: np.ndarray, conf_thresh: float = 0.25, iou_thresh: float = 0.45,
            batch_size: int = 16) -> List[Detections]:
    """Eval-mode forward + decode over a stack of images."""
    was_training = model.training
    model.eval()
    dets: List[Detections] = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                raw = model(Tensor(np.asarray(images[i:i + batch_size], dtype=np.float32)))
                dets.extend(decode(raw, model.cfg, conf_thresh, iou_thresh))
    finally:
        model.train(was_training)
    return dets
