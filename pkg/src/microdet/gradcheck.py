"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``fn(*inputs)`` must return a scalar tensor and be deterministic. Every
    input with ``requires_grad`` is probed coordinate by coordinate; the
    error at each coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``.

    Raises ``FloatingPointError`` naming the input and coordinate when the
    function or a gradient turns non-finite.
    """
    leaves = [t for t in inputs if t.requires_grad]
    for t in leaves:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: function value is non-finite at the base point")
    out.backward()

    worst = 0.0
    for li, t in enumerate(leaves):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.isfinite(analytic).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
            raise FloatingPointError(f"grad_check: non-finite analytic gradient for input {li} at {bad}")
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(fn(*inputs).data)
            flat[k] = orig - eps
            fm = float(fn(*inputs).data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                loc = np.unravel_index(k, t.shape)
                raise FloatingPointError(f"grad_check: non-finite value probing input {li} at {tuple(int(i) for i in loc)}")
            numeric = (fp - fm) / (2.0 * eps)
            a = float(aflat[k])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    for t in leaves:
        t.grad = None
    return worst


def resample_away_from(arr: np.ndarray, points: Sequence[float], margin: float, rng) -> np.ndarray:
    """Redraw entries of ``arr`` lying within ``margin`` of any kink point."""
    arr = arr.copy()
    for _ in range(100):
        bad = np.zeros(arr.shape, dtype=bool)
        for p in points:
            bad |= np.abs(arr - p) < margin
        if not bad.any():
            return arr
        arr[bad] = rng.normal(size=int(bad.sum()))
    raise RuntimeError("could not resample away from kink points")


def separate_ties(arr: np.ndarray, window_values: Callable[[np.ndarray], np.ndarray], margin: float, rng) -> np.ndarray:
    """Redraw until every pooling window's top two values differ by more than ``margin``."""
    arr = arr.copy()
    for _ in range(200):
        gaps = window_values(arr)
        if gaps.min() > margin:
            return arr
        arr = rng.normal(size=arr.shape)
    raise RuntimeError("could not separate max-pool ties")
