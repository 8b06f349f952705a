"""Flat ``key = value`` run configuration with dotted section keys."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import numpy as np

from .detector import ModelConfig, default_anchors
from .errors import ConfigError
from .losses import LossConfig


# key -> (default, help). Types follow the default.
DEFAULTS: Dict[str, Tuple[object, str]] = {
    "data.img_size": (64, "square image side; must match the dataset manifest"),
    "model.width_scale": (1.0, "channel multiplier on the base widths"),
    "model.depth_scale": (1.0, "bottlenecks per C3 stage"),
    "model.ghost": (False, "toggle I: ghost convs in the backbone"),
    "model.repgfpn": (False, "toggle II: GFPN-style neck of FC blocks"),
    "model.attention": (False, "toggle III: coordinate attention + transformer encoders"),
    "model.nwd": (False, "toggle IV: NWD box similarity instead of CIoU"),
    "model.anchors": ("", "18 numbers (3 scales x 3 anchors x w,h) in pixels; empty = scaled defaults"),
    "train.epochs": (30, "number of epochs"),
    "train.batch_size": (8, "images per step"),
    "train.lr": (1e-3, "peak learning rate"),
    "train.warmup_epochs": (3, "linear warmup length in epochs"),
    "train.final_lr_frac": (0.01, "cosine floor as a fraction of the peak"),
    "train.beta1": (0.9, "Adam beta1"),
    "train.beta2": (0.999, "Adam beta2"),
    "train.eps": (1e-8, "Adam epsilon"),
    "train.grad_clip": (10.0, "global gradient-norm clip"),
    "train.seed": (0, "seed for init, batch order and augmentation"),
    "train.eval_every": (1, "evaluate on val every N epochs (final epoch always)"),
    "train.augment": (True, "hflip / crop-resize / brightness / contrast"),
    "train.conf_thresh": (0.25, "confidence threshold for reported P/R"),
    "train.nms_iou": (0.45, "NMS IoU threshold"),
    "loss.nwd_c": ("auto", "NWD constant C in pixels; auto = mean sqrt(w*h) of the training boxes"),
    "loss.nwd_weight": (1.0, "NWD share of the box similarity when model.nwd is on"),
    "loss.box_weight": (1.0, "weight of the box term"),
    "loss.obj_weight": (1.0, "weight of the objectness term"),
    "loss.cls_weight": (0.5, "weight of the class term"),
    "loss.balance": ("4.0,1.0,0.4", "objectness weights for P3,P4,P5"),
}


def _coerce(key: str, raw: str, default):
    v = raw.strip()
    if isinstance(default, bool):
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return v


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: Dict[str, object]
    explicit: set = field(default_factory=set)     # keys set by a file or override

    @classmethod
    def default(cls) -> "RunConfig":
        return cls({k: d for k, (d, _) in DEFAULTS.items()})

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls.default()
        for ln, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{source}:{ln}: expected 'key = value'")
            key, val = (p.strip() for p in body.split("=", 1))
            cfg.set(key, val, where=f"{source}:{ln}")
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        return cls.parse(text, str(path))

    def set(self, key: str, value, where: str = "") -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"{where + ': ' if where else ''}unknown key {key!r}")
        default = DEFAULTS[key][0]
        self.explicit.add(key)
        self.values[key] = _coerce(key, value, default) if isinstance(value, str) else value

    def update(self, pairs: Iterable[Tuple[str, object]]) -> "RunConfig":
        for k, v in pairs:
            self.set(k, v)
        self.check()
        return self

    def __getitem__(self, key):
        return self.values[key]

    def check(self) -> None:
        v = self.values
        if v["train.epochs"] < 1:
            raise ConfigError("train.epochs must be >= 1")
        if v["train.batch_size"] < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if v["train.lr"] <= 0:
            raise ConfigError("train.lr must be > 0")
        if v["train.eval_every"] < 1:
            raise ConfigError("train.eval_every must be >= 1")
        self.nwd_c()
        self.balance()
        self.model_config(2)

    def balance(self) -> Tuple[float, float, float]:
        try:
            b = tuple(float(x) for x in str(self.values["loss.balance"]).split(","))
        except ValueError:
            raise ConfigError("loss.balance must be three comma-separated numbers") from None
        if len(b) != 3:
            raise ConfigError("loss.balance must be three comma-separated numbers")
        return b

    def nwd_c(self):
        """``None`` for auto, else the fixed constant."""
        raw = str(self.values["loss.nwd_c"]).strip()
        if raw.lower() == "auto":
            return None
        try:
            c = float(raw)
        except ValueError:
            raise ConfigError(f"loss.nwd_c must be 'auto' or a number, got {raw!r}") from None
        if not c > 0:
            raise ConfigError("loss.nwd_c must be > 0")
        return c

    def model_config(self, n_classes: int) -> ModelConfig:
        v = self.values
        anchors = None
        if str(v["model.anchors"]).strip():
            try:
                nums = [float(x) for x in str(v["model.anchors"]).replace(",", " ").split()]
            except ValueError:
                raise ConfigError("model.anchors must be numbers") from None
            if len(nums) != 18:
                raise ConfigError(f"model.anchors needs 18 numbers, got {len(nums)}")
            anchors = np.array(nums).reshape(3, 3, 2)
        return ModelConfig(img_size=v["data.img_size"], n_classes=n_classes, width_scale=v["model.width_scale"],
                           depth_scale=v["model.depth_scale"], ghost=v["model.ghost"], repgfpn=v["model.repgfpn"],
                           attention=v["model.attention"], nwd=v["model.nwd"], anchors=anchors)

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(nwd=v["model.nwd"], nwd_c=self.nwd_c(), nwd_weight=v["loss.nwd_weight"],
                          box_weight=v["loss.box_weight"], obj_weight=v["loss.obj_weight"],
                          cls_weight=v["loss.cls_weight"], balance=self.balance())

    def dump(self) -> str:
        lines = ["# effective configuration (defaults merged with overrides)"]
        for k in DEFAULTS:
            lines.append(f"{k} = {_fmt(self.values[k])}")
        return "\n".join(lines) + "\n"


def describe() -> str:
    width = max(len(k) for k in DEFAULTS)
    return "\n".join(f"{k:<{width}}  {_fmt(d):>12}  {h}" for k, (d, h) in DEFAULTS.items())


__all__ = ["RunConfig", "DEFAULTS", "describe", "default_anchors"]
