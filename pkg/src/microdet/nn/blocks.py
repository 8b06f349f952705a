"""Detector building blocks.

CBS, ghost convolution and bottleneck, C3, the reparameterisable RepConvN,
the fusion (FC) block, coordinate attention, a post-norm transformer
encoder for feature maps, and SPPF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .. import ops
from ..errors import ConfigError, ShapeError, StateError
from ..rng import Rng
from ..tensor import Tensor
from .layers import BatchNorm2d, Conv2d, LayerNorm, Linear
from .module import Module, ModuleList


class CBS(Module):
    """Conv -> BatchNorm -> SiLU with 'same' padding."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, groups: int = 1,
                 act: bool = True, rng: Optional[Rng] = None):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"CBS kernel size must be odd, got {k}")
        rng = rng or Rng(0)
        self.conv = Conv2d(c_in, c_out, k, stride, k // 2, groups, bias=False, rng=rng.spawn(0))
        self.bn = BatchNorm2d(c_out)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.silu(y) if self.act else y


@dataclass(frozen=True)
class GhostSpec:
    c_in: int
    c_out: int
    s: int = 2           # maps produced per intrinsic map
    k: int = 1           # primary kernel
    dw_k: int = 3        # cheap depthwise kernel
    stride: int = 1

    def __post_init__(self):
        if self.s < 1:
            raise ConfigError(f"ghost ratio s must be >= 1, got {self.s}")
        if self.c_out % self.s:
            raise ConfigError(f"ghost c_out={self.c_out} is not divisible by s={self.s}")

    @property
    def m(self) -> int:
        return self.c_out // self.s


class GhostConv(Module):
    """Primary conv to m = c_out/s intrinsic maps, then depthwise 'cheap' maps.

    Output channel ``i`` for ``i < m`` is the intrinsic map itself (identity
    transform); the remaining ``m*(s-1)`` channels come from a depthwise conv
    with channel multiplier ``s-1`` applied to the intrinsic maps.
    """

    def __init__(self, spec: GhostSpec, act: bool = True, rng: Optional[Rng] = None):
        super().__init__()
        rng = rng or Rng(0)
        self.spec = spec
        self.primary = CBS(spec.c_in, spec.m, spec.k, spec.stride, act=act, rng=rng.spawn(0))
        if spec.s > 1:
            self.cheap = CBS(spec.m, spec.m * (spec.s - 1), spec.dw_k, 1, groups=spec.m, act=act, rng=rng.spawn(1))
        else:
            self.cheap = None

    def forward(self, x: Tensor) -> Tensor:
        y = self.primary(x)
        if self.cheap is None:
            return y
        return ops.concat([y, self.cheap(y)], axis=1)


class GhostBottleneck(Module):
    def __init__(self, c_in: int, c_mid: int, c_out: int, stride: int = 1, dw_k: int = 3, rng: Optional[Rng] = None):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"ghost bottleneck stride must be 1 or 2, got {stride}")
        rng = rng or Rng(0)
        self.stride = stride
        self.ghost1 = GhostConv(GhostSpec(c_in, c_mid, 2, 1, dw_k), act=True, rng=rng.spawn(0))
        self.dw = CBS(c_mid, c_mid, 3, 2, groups=c_mid, act=False, rng=rng.spawn(1)) if stride == 2 else None
        self.ghost2 = GhostConv(GhostSpec(c_mid, c_out, 2, 1, dw_k), act=False, rng=rng.spawn(2))
        if stride == 1 and c_in == c_out:
            self.short_dw = None
            self.short_pw = None
        else:
            self.short_dw = CBS(c_in, c_in, 3, stride, groups=c_in, act=False, rng=rng.spawn(3))
            self.short_pw = CBS(c_in, c_out, 1, 1, act=False, rng=rng.spawn(4))

    def forward(self, x: Tensor) -> Tensor:
        y = self.ghost1(x)
        if self.dw is not None:
            y = self.dw(y)
        y = self.ghost2(y)
        short = x if self.short_dw is None else self.short_pw(self.short_dw(x))
        return y + short


class Bottleneck(Module):
    def __init__(self, c_in: int, c_out: int, shortcut: bool = True, e: float = 1.0, rng: Optional[Rng] = None):
        super().__init__()
        rng = rng or Rng(0)
        c_ = int(c_out * e)
        self.cv1 = CBS(c_in, c_, 1, rng=rng.spawn(0))
        self.cv2 = CBS(c_, c_out, 3, rng=rng.spawn(1))
        self.add = shortcut and c_in == c_out

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3(Module):
    """Two 1x1 paths, one through ``n`` bottlenecks, concatenated and projected.

    ``ghost=True`` swaps the standard bottlenecks for ghost bottlenecks.
    """

    def __init__(self, c_in: int, c_out: int, n: int = 1, shortcut: bool = True, e: float = 0.5,
                 ghost: bool = False, rng: Optional[Rng] = None):
        super().__init__()
        rng = rng or Rng(0)
        c_ = max(int(c_out * e), 1)
        self.cv1 = CBS(c_in, c_, 1, rng=rng.spawn(0))
        self.cv2 = CBS(c_in, c_, 1, rng=rng.spawn(1))
        self.cv3 = CBS(2 * c_, c_out, 1, rng=rng.spawn(2))
        if ghost:
            self.ghost_m = ModuleList(GhostBottleneck(c_, c_, c_, 1, rng=rng.spawn(3, i)) for i in range(n))
            self.m = None
        else:
            self.m = ModuleList(Bottleneck(c_, c_, shortcut, 1.0, rng=rng.spawn(3, i)) for i in range(n))

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        for b in (self.m if self.m is not None else self.ghost_m):
            y = b(y)
        return self.cv3(ops.concat([y, self.cv2(x)], axis=1))


class RepConvN(Module):
    """Parallel 3x3 and 1x1 conv+BN branches (no identity), summed, then SiLU.

    After :meth:`fuse` the branches are replaced by one 3x3 conv with bias
    that computes the same function in eval mode.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, rng: Optional[Rng] = None):
        super().__init__()
        rng = rng or Rng(0)
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.conv3 = Conv2d(c_in, c_out, 3, stride, 1, rng=rng.spawn(0))
        self.bn3 = BatchNorm2d(c_out)
        self.conv1 = Conv2d(c_in, c_out, 1, stride, 0, rng=rng.spawn(1))
        self.bn1 = BatchNorm2d(c_out)
        self.deployed = False

    def forward(self, x: Tensor, mode: Optional[str] = None) -> Tensor:
        mode = mode or ("deploy" if self.deployed else "train")
        if mode == "deploy":
            if not self.deployed:
                raise StateError("RepConvN: deploy mode requested before fuse()")
            return ops.silu(ops.conv2d(x, self.fused_weight, self.fused_bias, self.stride, 1))
        if mode != "train":
            raise ValueError(f"RepConvN mode must be 'train' or 'deploy', got {mode!r}")
        if self.deployed:
            raise StateError("RepConvN: branches were removed by fuse(); only deploy mode is available")
        return ops.silu(self.bn3(self.conv3(x)) + self.bn1(self.conv1(x)))

    def fused_kernel(self):
        """Fused (weight, bias) as float64 arrays without changing the module."""
        if self.deployed:
            raise StateError("RepConvN: already deployed; fusing twice is not allowed")
        if self.bn3.training or self.bn1.training:
            raise StateError("RepConvN: fuse() needs eval-mode batch-norm (finalised running statistics)")
        s3, t3 = self.bn3.folded()
        s1, t1 = self.bn1.folded()
        k3 = self.conv3.weight.data.astype(np.float64) * s3[:, None, None, None]
        k1 = self.conv1.weight.data.astype(np.float64) * s1[:, None, None, None]
        k = k3.copy()
        k[:, :, 1, 1] += k1[:, :, 0, 0]
        return k, t3 + t1

    def fuse(self) -> None:
        k, b = self.fused_kernel()
        dtype = self.conv3.weight.dtype
        for name in ("conv3", "bn3", "conv1", "bn1"):
            delattr(self, name)
        self.param("fused_weight", k.astype(dtype))
        self.param("fused_bias", b.astype(dtype))
        self.deployed = True


class FCBlock(Module):
    """Fusion block: concat inputs, then a CBS pass-through beside a chain of
    RepConvN + 3x3 CBS stages; every stage output joins the final 1x1 CBS.
    """

    def __init__(self, c_in: int, c_out: int, depth: int = 2, hidden: Optional[int] = None, rng: Optional[Rng] = None):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"FC block depth must be >= 1, got {depth}")
        rng = rng or Rng(0)
        h = hidden or max(c_out // 2, 1)
        self.c_in = c_in
        self.passthrough = CBS(c_in, h, 1, rng=rng.spawn(0))
        self.entry = CBS(c_in, h, 1, rng=rng.spawn(1))
        self.reps = ModuleList(RepConvN(h, h, rng=rng.spawn(2, i)) for i in range(depth))
        self.convs = ModuleList(CBS(h, h, 3, rng=rng.spawn(3, i)) for i in range(depth))
        self.out = CBS(h * (depth + 1), c_out, 1, rng=rng.spawn(4))

    def forward(self, inputs: Sequence[Tensor]) -> Tensor:
        if isinstance(inputs, Tensor):
            inputs = [inputs]
        hw = inputs[0].shape[2:]
        for i, t in enumerate(inputs):
            if t.shape[2:] != hw:
                raise ShapeError(f"FC block input {i} has spatial size {t.shape[2:]}, expected {hw}")
        x = inputs[0] if len(inputs) == 1 else ops.concat(list(inputs), axis=1)
        if x.shape[1] != self.c_in:
            raise ShapeError(f"FC block expects {self.c_in} concatenated channels, got {x.shape[1]}")
        outs = [self.passthrough(x)]
        y = self.entry(x)
        for rep, conv in zip(self.reps, self.convs):
            y = conv(rep(y))
            outs.append(y)
        return self.out(ops.concat(outs, axis=1))


class CoordAttention(Module):
    """Gate a feature map with per-row and per-column sigmoid weights."""

    def __init__(self, c: int, reduction: int = 16, rng: Optional[Rng] = None):
        super().__init__()
        if reduction < 1:
            raise ConfigError(f"coordinate attention reduction must be >= 1, got {reduction}")
        rng = rng or Rng(0)
        mip = max(8, c // reduction)
        self.squeeze = CBS(c, mip, 1, rng=rng.spawn(0))
        self.gate_h = Conv2d(mip, c, 1, bias=True, rng=rng.spawn(1))
        self.gate_w = Conv2d(mip, c, 1, bias=True, rng=rng.spawn(2))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        pooled_h = ops.mean_over(x, axis=3, keepdims=True)                      # (N, C, H, 1)
        pooled_w = ops.permute(ops.mean_over(x, axis=2, keepdims=True), (0, 1, 3, 2))  # (N, C, W, 1)
        y = self.squeeze(ops.concat([pooled_h, pooled_w], axis=2))
        y_h, y_w = ops.split(y, [h, w], axis=2)
        g_h = ops.sigmoid(self.gate_h(y_h))
        g_w = ops.sigmoid(self.gate_w(ops.permute(y_w, (0, 1, 3, 2))))
        return x * g_h * g_w


class EncoderLayer(Module):
    """Post-norm block: LN(x + MHA(x)) then LN(x + MLP(x))."""

    def __init__(self, c: int, heads: int, mlp_ratio: float, rng: Rng):
        super().__init__()
        self.heads = heads
        # a key bias only shifts each softmax row by a constant, so q/k/v are bias-free
        self.qkv = Linear(c, 3 * c, bias=False, rng=rng.spawn(0))
        self.proj = Linear(c, c, rng=rng.spawn(1))
        self.norm1 = LayerNorm(c)
        hidden = int(round(c * mlp_ratio))
        self.mlp_in = Linear(c, hidden, rng=rng.spawn(2))
        self.mlp_out = Linear(hidden, c, rng=rng.spawn(3))
        self.norm2 = LayerNorm(c)
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, t: Tensor) -> Tensor:
        n, length, c = t.shape
        d = c // self.heads
        qkv = ops.permute(ops.reshape(self.qkv(t), (n, length, 3, self.heads, d)), (2, 0, 3, 1, 4))
        q, k, v = (ops.reshape(p, (n, self.heads, length, d)) for p in ops.split(qkv, [1, 1, 1], axis=0))
        scores = ops.matmul(q, ops.permute(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
        attn = ops.softmax(scores, axis=-1)
        self.last_attention = attn.data
        o = ops.reshape(ops.permute(ops.matmul(attn, v), (0, 2, 1, 3)), (n, length, c))
        t = self.norm1(t + self.proj(o))
        m = self.mlp_out(ops.silu(self.mlp_in(t)))
        return self.norm2(t + m)


class TransformerEncoder(Module):
    """Token-mixing encoder over the H*W positions of a feature map."""

    def __init__(self, c: int, max_tokens: int, heads: int = 4, mlp_ratio: float = 2.0, layers: int = 1,
                 rng: Optional[Rng] = None):
        super().__init__()
        if c % heads:
            raise ConfigError(f"transformer channels {c} not divisible by heads {heads}")
        rng = rng or Rng(0)
        self.c, self.max_tokens = c, max_tokens
        self.param("pos", rng.normal(0.0, 0.02, size=(1, max_tokens, c)).astype(np.float32))
        self.layers = ModuleList(EncoderLayer(c, heads, mlp_ratio, rng.spawn(1, i)) for i in range(layers))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        length = h * w
        if c != self.c:
            raise ShapeError(f"transformer expects {self.c} channels, got {c}")
        if length > self.max_tokens:
            raise ShapeError(f"transformer: {length} tokens exceed positional capacity {self.max_tokens}")
        t = ops.permute(ops.reshape(x, (n, c, length)), (0, 2, 1))
        pos = self.pos if length == self.max_tokens else ops.index(self.pos, (slice(None), slice(0, length)))
        t = t + pos
        for layer in self.layers:
            t = layer(t)
        return ops.reshape(ops.permute(t, (0, 2, 1)), (n, c, h, w))


class SPPF(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 5, rng: Optional[Rng] = None):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"SPPF pool size must be odd, got {k}")
        rng = rng or Rng(0)
        c_ = max(c_in // 2, 1)
        self.k = k
        self.cv1 = CBS(c_in, c_, 1, rng=rng.spawn(0))
        self.cv2 = CBS(4 * c_, c_out, 1, rng=rng.spawn(1))

    def forward(self, x: Tensor) -> Tensor:
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(ops.max_pool2d(y[-1], self.k, 1, self.k // 2))
        return self.cv2(ops.concat(y, axis=1))


def rep_modules(model: Module) -> List[RepConvN]:
    return [m for _, m in model.named_modules() if isinstance(m, RepConvN)]
