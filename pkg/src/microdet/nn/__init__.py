from .blocks import (
    C3,
    CBS,
    SPPF,
    Bottleneck,
    CoordAttention,
    EncoderLayer,
    FCBlock,
    GhostBottleneck,
    GhostConv,
    GhostSpec,
    RepConvN,
    TransformerEncoder,
    rep_modules,
)
from .layers import BatchNorm2d, Conv2d, LayerNorm, Linear
from .module import Module, ModuleList

__all__ = [
    "Module", "ModuleList", "Conv2d", "BatchNorm2d", "Linear", "LayerNorm", "CBS", "GhostSpec",
    "GhostConv", "GhostBottleneck", "Bottleneck", "C3", "RepConvN", "FCBlock", "CoordAttention",
    "EncoderLayer", "TransformerEncoder", "SPPF", "rep_modules",
]
