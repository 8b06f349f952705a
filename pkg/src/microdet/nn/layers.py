"""Parameterised primitive layers: conv, batch-norm, linear, layer-norm."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .. import ops
from ..rng import Rng
from ..tensor import Tensor
from .module import Module


def kaiming_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, pad: Optional[int] = None,
                 groups: int = 1, bias: bool = False, rng: Optional[Rng] = None):
        super().__init__()
        rng = rng or Rng(0)
        self.c_in, self.c_out, self.k, self.stride, self.groups = c_in, c_out, k, stride, groups
        self.pad = k // 2 if pad is None else pad
        fan_in = (c_in // groups) * k * k
        self.param("weight", kaiming_uniform(rng, (c_out, c_in // groups, k, k), fan_in))
        if bias:
            self.param("bias", np.zeros(c_out, dtype=np.float32))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.param("gamma", np.ones(c, dtype=np.float32))
        self.param("beta", np.zeros(c, dtype=np.float32))
        self.buffer("running_mean", np.zeros(c, dtype=np.float32))
        self.buffer("running_var", np.ones(c, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.eps, self.training, self.momentum)

    def folded(self):
        """(scale, shift) such that BN(y) == scale * y + shift in eval mode."""
        std = np.sqrt(self.running_var.astype(np.float64) + self.eps)
        scale = self.gamma.data.astype(np.float64) / std
        shift = self.beta.data.astype(np.float64) - self.running_mean.astype(np.float64) * scale
        return scale, shift


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True, rng: Optional[Rng] = None):
        super().__init__()
        rng = rng or Rng(0)
        bound = 1.0 / math.sqrt(c_in)
        self.param("weight", rng.uniform(-bound, bound, size=(c_in, c_out)).astype(np.float32))
        if bias:
            self.param("bias", np.zeros(c_out, dtype=np.float32))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.param("gamma", np.ones(c, dtype=np.float32))
        self.param("beta", np.zeros(c, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
