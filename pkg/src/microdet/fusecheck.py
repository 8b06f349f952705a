"""Reparameterisation equivalence trials (branch form vs fused 3x3)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .detector import ModelConfig, build, reparameterize
from .nn import BatchNorm2d, RepConvN
from .rng import Rng
from .tensor import Tensor, no_grad

BLOCK_TOL = 1e-5
MODEL_TOL = 1e-4


def randomize_bn(module, rng: Rng) -> None:
    for _, m in module.named_modules():
        if isinstance(m, BatchNorm2d):
            k = m.gamma.shape[0]
            dt = m.gamma.data.dtype
            m.gamma.data[:] = rng.uniform(0.5, 1.5, k).astype(dt)
            m.beta.data[:] = rng.normal(0.0, 0.3, k).astype(dt)
            m.set_buffer("running_mean", rng.normal(0.0, 0.3, k).astype(m.running_mean.dtype))
            m.set_buffer("running_var", rng.uniform(0.5, 1.5, k).astype(m.running_var.dtype))


@dataclass
class Trial:
    index: int
    c_in: int
    c_out: int
    hw: int
    stride: int
    max_abs: float


def block_trial(index: int, seed: int, dtype=np.float32) -> Trial:
    rng = Rng(seed).spawn(index)
    c_in = int(rng.integers(1, 33))
    c_out = int(rng.integers(1, 33))
    hw = int(rng.integers(1, 17))
    stride = int(rng.integers(1, 3))
    n = int(rng.integers(1, 3))
    block = RepConvN(c_in, c_out, stride, rng=rng.spawn(1))
    randomize_bn(block, rng.spawn(2))
    block.to(dtype)
    block.eval()
    x = Tensor(rng.normal(size=(n, c_in, hw, hw)).astype(dtype))
    with no_grad():
        ref = block(x).data.copy()
        block.fuse()
        got = block(x).data
    return Trial(index, c_in, c_out, hw, stride, float(np.max(np.abs(ref.astype(np.float64) - got))))


def block_trials(n: int, seed: int = 0, dtype=np.float32) -> List[Trial]:
    return [block_trial(i, seed, dtype) for i in range(n)]


def model_check(n_inputs: int = 100, seed: int = 0, img_size: int = 64, batch: int = 10) -> List[float]:
    """Per-input max-abs deviation of a RepGFPN detector before/after fusion."""
    cfg = ModelConfig(img_size=img_size, repgfpn=True)
    model = build(cfg, seed)
    randomize_bn(model, Rng(seed).spawn(7))
    model.eval()
    rng = Rng(seed).spawn(8)
    x = rng.random((n_inputs, 3, img_size, img_size)).astype(np.float32)
    with no_grad():
        ref = [[o.data.copy() for o in model(Tensor(x[i:i + batch]))] for i in range(0, n_inputs, batch)]
        reparameterize(model)
        got = [[o.data for o in model(Tensor(x[i:i + batch]))] for i in range(0, n_inputs, batch)]
    dev = []
    for r_chunk, g_chunk in zip(ref, got):
        per = np.zeros(r_chunk[0].shape[0])
        for r, g in zip(r_chunk, g_chunk):
            per = np.maximum(per, np.abs(r.astype(np.float64) - g).reshape(len(per), -1).max(axis=1))
        dev.extend(per.tolist())
    return dev
