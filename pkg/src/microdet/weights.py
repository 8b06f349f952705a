"""TDW1 tensor files.

Layout (all little-endian, no padding)::

    b"TDW1" | u32 version=1 | u32 count |
    count x ( u16 name_len | name utf-8 | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 dim | payload )
"""

from __future__ import annotations

import os
import struct
from typing import Dict

import numpy as np

from .errors import FormatError

MAGIC = b"TDW1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tdw(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype}", name)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError("tensor name too long", name)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_tdw(buf: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated payload while reading {what} (need {n} bytes at offset {pos})", source)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a TDW1 file", source)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", source)
    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of tensor #{i}"))
        try:
            name = take(nlen, f"name of tensor #{i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor #{i} name is not utf-8", source) from None
        where = f"{source}: {name}"
        code, rank = struct.unpack("<BB", take(2, f"dtype/rank of {name}"))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", where)
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        data = take(nbytes, f"payload of {name}")
        if name in out:
            raise FormatError("duplicate tensor name", where)
        out[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", source)
    return out


def write_tdw(path, tensors: Dict[str, np.ndarray]) -> None:
    data = encode_tdw(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_tdw(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_tdw(f.read(), str(path))


def save_weights(model, path) -> None:
    write_tdw(path, model.state_dict())


def load_weights(path, config, seed: int = 0):
    """Build a model for ``config`` and fill it from ``path``.

    Files written from a reparameterized model carry ``fused_weight``
    tensors; the fresh model is fused first so the names line up.
    """
    from .detector import build, reparameterize

    state = read_tdw(path)
    model = build(config, seed)
    if any(k.endswith("fused_weight") for k in state):
        model.eval()
        reparameterize(model)
    model.load_state_dict(state, source=str(path))
    return model
