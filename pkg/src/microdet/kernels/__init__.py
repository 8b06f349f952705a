"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``MICRODET_NUMBA``
is not set to ``0``. Both paths expose the same functions; the active one
is re-exported here. ``BACKEND`` names the active path.
"""

import os

from . import _numpy

_want = os.environ.get("MICRODET_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if _want:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is an optional speedup
        _impl = _numpy
        BACKEND = "numpy"
else:
    _impl = _numpy
    BACKEND = "numpy"

col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
polyline_coverage = _impl.polyline_coverage
ellipse_coverage = _impl.ellipse_coverage

# sliding_window_view + one contiguous copy beats the scalar loop for the
# patch gather, so both backends share the numpy im2col.
im2col = _numpy.im2col


def nms(boxes, order, iou_thresh):
    import numpy as np

    boxes = np.ascontiguousarray(boxes, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    return _impl.nms(boxes, order, float(iou_thresh))


__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "nms",
    "polyline_coverage",
    "ellipse_coverage",
]
