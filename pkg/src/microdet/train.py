"""Training loop: Adam, warmup + cosine schedule, checkpoints, RunLog."""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import RunConfig
from .data import NO_AUGMENT, AugPolicy, Dataset, Sample, augment
from .detector import Detector, ModelConfig, build, predict
from .errors import ConfigError, FormatError, MicrodetError
from .losses import LossConfig, assign, composite_loss, flatten_gts, mean_box_size
from .metrics import EvalReport, evaluate
from .rng import Rng, derive_seed
from .tensor import Tensor
from .weights import read_tdw, write_tdw

RUNLOG_HEADER = "epoch,loss,box,obj,cls,map50,precision,recall,seconds"
EVAL_CONF = 0.001         # decode threshold for the AP sweep


class TrainingAborted(MicrodetError, RuntimeError):
    """Loss went non-finite; the last good checkpoint is left in place."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    warmup_epochs: int = 3
    final_lr_frac: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    seed: int = 0
    eval_every: int = 1
    augment: bool = True
    conf_thresh: float = 0.25
    nms_iou: float = 0.45

    @classmethod
    def from_run_config(cls, rc: RunConfig) -> "TrainConfig":
        return cls(**{k.split(".", 1)[1]: rc[k] for k in rc.values if k.startswith("train.")})

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.eval_every < 1:
            raise ConfigError("need epochs >= 1, batch_size >= 1, lr > 0, eval_every >= 1")


def lr_at(step: int, steps_per_epoch: int, tc: TrainConfig) -> float:
    total = tc.epochs * steps_per_epoch
    warm = tc.warmup_epochs * steps_per_epoch
    if step < warm:
        return tc.lr * (step + 1) / warm
    span = max(1, total - warm)
    t = min(1.0, (step - warm) / span)
    floor = tc.lr * tc.final_lr_frac
    return floor + (tc.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


class Adam:
    def __init__(self, params: Dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)

    def state(self) -> Dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load(self, state: Dict[str, np.ndarray], t: int, source: str = "") -> None:
        want = set(self.state())
        extra = sorted(set(state) - want)
        missing = sorted(want - set(state))
        if extra or missing:
            name = (extra or missing)[0]
            raise FormatError(f"optimizer tensor {name!r} {'unexpected' if extra else 'missing'}", source)
        for k in self.m:
            for pre, store in (("m.", self.m), ("v.", self.v)):
                arr = state[pre + k]
                if arr.shape != store[k].shape:
                    raise FormatError(f"optimizer tensor {pre + k!r} has shape {arr.shape}, expected {store[k].shape}",
                                      source)
                store[k] = np.array(arr, dtype=store[k].dtype, copy=True)
        self.t = int(t)


def clip_grad_norm(params, max_norm: float) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= np.float32(scale) if p.grad.dtype == np.float32 else scale
    return norm


# -- evaluation ----------------------------------------------------------------------

def evaluate_model(model: Detector, dataset, conf_thresh: float = 0.25, nms_iou: float = 0.45) -> EvalReport:
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate an empty split")
    images, gts = dataset.arrays() if isinstance(dataset, Dataset) else _stack(dataset)
    dets = predict(model, images, EVAL_CONF, nms_iou)
    size = model.cfg.img_size
    gts_px = []
    for g in gts:
        g = np.asarray(g, dtype=np.float64).reshape(-1, 5).copy()
        g[:, 1:] *= size
        gts_px.append(g)
    return evaluate(dets, gts_px, model.cfg.n_classes, conf_thresh, 0.5)


def _stack(samples: List[Sample]):
    return np.stack([s.image for s in samples]), [s.gts for s in samples]


# -- run log -------------------------------------------------------------------------

@dataclass
class LogRow:
    epoch: int
    loss: float
    box: float
    obj: float
    cls: float
    map50: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    seconds: float = 0.0

    def csv(self) -> str:
        def f(v):
            return "" if v is None else f"{v:.6f}"
        return (f"{self.epoch},{self.loss:.6f},{self.box:.6f},{self.obj:.6f},{self.cls:.6f},"
                f"{f(self.map50)},{f(self.precision)},{f(self.recall)},{self.seconds:.3f}")

    @classmethod
    def parse(cls, line: str, where: str) -> "LogRow":
        parts = line.strip().split(",")
        if len(parts) != 9:
            raise FormatError(f"expected 9 columns, got {len(parts)}", where)
        try:
            opt = [None if p == "" else float(p) for p in parts[5:8]]
            return cls(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4]),
                       opt[0], opt[1], opt[2], float(parts[8]))
        except ValueError:
            raise FormatError("non-numeric RunLog field", where) from None


def write_runlog(path, rows: List[LogRow]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as f:
        f.write(RUNLOG_HEADER + "\n")
        for r in rows:
            f.write(r.csv() + "\n")
    os.replace(tmp, path)


def read_runlog(path) -> List[LogRow]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != RUNLOG_HEADER:
        raise FormatError("bad RunLog header", str(path))
    return [LogRow.parse(l, f"{path}:{i}") for i, l in enumerate(lines[1:], 2) if l.strip()]


# -- checkpoints ---------------------------------------------------------------------

def _write_state(path, entries: Dict[str, object]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as f:
        for k, v in entries.items():
            f.write(f"{k} = {v}\n")
    os.replace(tmp, path)


def read_state(path) -> Dict[str, str]:
    out = {}
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint state: {e.strerror}", str(path)) from None
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if " = " not in line:
            raise FormatError("expected 'key = value'", f"{path}:{ln}")
        k, v = line.split(" = ", 1)
        out[k.strip()] = v.strip()
    for need in ("epoch", "step", "adam_t", "best_map"):
        if need not in out:
            raise FormatError(f"checkpoint state lacks {need!r}", str(path))
    return out


def save_checkpoint(ckpt_dir, model: Detector, opt: Adam, epoch: int, step: int, best_map: float,
                    tc: TrainConfig, extra: Optional[Dict[str, object]] = None) -> None:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_tdw(d / "weights.tdw", model.state_dict())
    write_tdw(d / "optim.tdw", opt.state())
    entries = {"epoch": epoch, "step": step, "adam_t": opt.t, "best_map": repr(float(best_map))}
    entries.update({f"model.{k}": v for k, v in model.cfg.to_dict().items()})
    entries.update({"train.seed": tc.seed, "train.batch_size": tc.batch_size, "train.lr": repr(tc.lr)})
    entries.update(extra or {})
    _write_state(d / "state.txt", entries)


def model_config_from_state(state: Dict[str, str]) -> ModelConfig:
    try:
        return ModelConfig.from_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
    except KeyError as e:
        raise FormatError(f"checkpoint state lacks model.{e.args[0]}") from None


# -- the loop ------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Detector
    log: List[LogRow]
    best_map: float
    out_dir: Path
    stopped_early: bool = False
    loss_cfg: Optional[LossConfig] = None


def _batch_targets(samples: List[Sample], img_size: int, cfg: ModelConfig):
    gts = []
    for s in samples:
        g = s.gts.astype(np.float64).reshape(-1, 5).copy()
        g[:, 1:] *= img_size
        gts.append(g)
    return assign(flatten_gts(gts), cfg.anchors, cfg.strides, cfg.grids)


def train(model_cfg: ModelConfig, train_set, val_set, tc: TrainConfig, out_dir, loss_cfg: Optional[LossConfig] = None,
          resume: bool = False, stop_after: Optional[int] = None, log_fn=None) -> TrainResult:
    """Train a fresh model (or continue from ``out_dir/checkpoints/last``).

    ``stop_after`` ends the run after that epoch while keeping the schedule of
    the full ``tc.epochs`` run, which is how an interrupted run is simulated.
    """
    tc.validate()
    loss_cfg = loss_cfg or LossConfig(nwd=model_cfg.nwd)
    out = Path(out_dir)
    ckpt = out / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    img_size = model_cfg.img_size

    model = build(model_cfg, tc.seed)
    params = dict(model.named_parameters())
    opt = Adam(params, tc.beta1, tc.beta2, tc.eps)
    start_epoch, step, best_map = 1, 0, -1.0
    log: List[LogRow] = []
    if resume:
        last = ckpt / "last"
        state = read_state(last / "state.txt")
        saved = model_config_from_state(state)
        for k, v in saved.to_dict().items():
            if model_cfg.to_dict()[k] != v:
                raise ConfigError(f"resume: checkpoint has model.{k} = {v}, run asks for {model_cfg.to_dict()[k]}")
        if int(state.get("train.seed", tc.seed)) != tc.seed:
            raise ConfigError(f"resume: checkpoint seed {state['train.seed']} differs from {tc.seed}")
        if int(state.get("train.batch_size", tc.batch_size)) != tc.batch_size:
            raise ConfigError("resume: batch_size differs from the checkpoint")
        model.load_state_dict(read_tdw(last / "weights.tdw"), source=str(last / "weights.tdw"))
        opt.load(read_tdw(last / "optim.tdw"), int(state["adam_t"]), str(last / "optim.tdw"))
        start_epoch = int(state["epoch"]) + 1
        step = int(state["step"])
        best_map = float(state["best_map"])
        log = [r for r in read_runlog(out / "runlog.csv") if r.epoch < start_epoch]

    n = len(train_set)
    samples = list(train_set)
    if loss_cfg.nwd and loss_cfg.nwd_c is None:
        try:
            loss_cfg = replace(loss_cfg, nwd_c=mean_box_size([s.gts_pixels() for s in samples]))
        except ValueError as e:
            raise ConfigError(f"loss.nwd_c = auto: {e}") from None
    extra = {"loss.nwd_c": repr(loss_cfg.nwd_c)} if loss_cfg.nwd else {}
    steps_per_epoch = (n + tc.batch_size - 1) // tc.batch_size
    policy = AugPolicy() if tc.augment else NO_AUGMENT
    end_epoch = tc.epochs if stop_after is None else min(tc.epochs, stop_after)
    plist = list(params.values())
    for epoch in range(start_epoch, end_epoch + 1):
        t0 = time.perf_counter()
        model.train()
        order = Rng(derive_seed(tc.seed, 1, epoch)).permutation(n)
        sums = np.zeros(4)
        for bi in range(steps_per_epoch):
            idx = order[bi * tc.batch_size:(bi + 1) * tc.batch_size]
            batch = [augment(samples[i], policy, Rng(derive_seed(tc.seed, 2, epoch, int(i)))) for i in idx]
            x = Tensor(np.stack([s.image for s in batch]))
            targets = _batch_targets(batch, img_size, model_cfg)
            raw = model(x)
            lb = composite_loss(raw, targets, model_cfg.anchors, model_cfg.strides, model_cfg.n_classes, loss_cfg)
            loss_val = float(lb.total.data)
            if not math.isfinite(loss_val):
                raise TrainingAborted(f"non-finite loss {loss_val} at epoch {epoch}, step {bi + 1}/{steps_per_epoch}"
                                      f"; last good checkpoint kept in {ckpt / 'last'}")
            model.zero_grad()
            lb.total.backward()
            clip_grad_norm(plist, tc.grad_clip)
            opt.step(lr_at(step, steps_per_epoch, tc))
            step += 1
            sums += (loss_val, lb.box, lb.obj, lb.cls)
        means = sums / steps_per_epoch
        row = LogRow(epoch, *means.tolist())
        if epoch % tc.eval_every == 0 or epoch == tc.epochs:
            rep = evaluate_model(model, val_set, tc.conf_thresh, tc.nms_iou)
            row.map50, row.precision, row.recall = rep.map50, rep.precision, rep.recall
            if rep.map50 > best_map:
                best_map = rep.map50
                save_checkpoint(ckpt / "best", model, opt, epoch, step, best_map, tc, extra)
        row.seconds = time.perf_counter() - t0
        log.append(row)
        save_checkpoint(ckpt / "last", model, opt, epoch, step, best_map, tc, extra)
        write_runlog(out / "runlog.csv", log)
        if log_fn:
            log_fn(row)
    return TrainResult(model, log, best_map, out, stopped_early=end_epoch < tc.epochs, loss_cfg=loss_cfg)
