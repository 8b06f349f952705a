"""Pure-numpy reference kernels.

Every function here has a numba twin in ``_numba.py`` with the same
signature and bit-compatible results (up to float summation order for
col2im, which both paths perform in the same kh, kw order).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    """(N, C, Hp, Wp) -> (N, C*kh*kw, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, ho, wo, kh, kw) -> (N, C, kh, kw, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, xp_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = xp_shape
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def maxpool_forward(xp, k, stride, ho, wo):
    """Returns pooled values and the flat (row-major within each plane) argmax.

    Ties resolve to the lowest linear index.
    """
    n, c, hp, wp = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    win = win.reshape(n, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, k)
    oy = (np.arange(ho) * stride)[:, None]
    ox = (np.arange(wo) * stride)[None, :]
    flat = (oy + di) * wp + (ox + dj)
    return np.ascontiguousarray(out), flat.astype(np.int64)


def maxpool_backward(g, flat, xp_shape):
    n, c, hp, wp = xp_shape
    out = np.zeros((n * c, hp * wp), dtype=g.dtype)
    rows = np.repeat(np.arange(n * c), flat.shape[2] * flat.shape[3])
    np.add.at(out, (rows, flat.reshape(-1)), g.reshape(-1))
    return out.reshape(xp_shape)


def box_iou_one_to_many(box, boxes):
    """IoU of one xyxy box against an (M, 4) xyxy array."""
    iw = np.clip(np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0]), 0.0, None)
    ih = np.clip(np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1]), 0.0, None)
    inter = iw * ih
    area_a = (box[2] - box[0]) * (box[3] - box[1])
    area_b = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes, order, iou_thresh):
    """Greedy NMS over xyxy boxes visited in ``order``; returns kept indices."""
    suppressed = np.zeros(len(boxes), dtype=np.bool_)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1 :]
        if len(rest):
            ious = box_iou_one_to_many(boxes[i], boxes[rest])
            suppressed[rest[ious > iou_thresh]] = True
    return np.asarray(keep, dtype=np.int64)


def polyline_coverage(h, w, pts, half_width):
    """Anti-aliased coverage of a thick polyline sampled at pixel centres.

    Coverage is ``clip(half_width + 0.5 - d, 0, 1)`` where ``d`` is the
    distance from the pixel centre to the nearest segment.
    """
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    dist = np.full((h, w), np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        dx, dy = b[0] - a[0], b[1] - a[1]
        ll = dx * dx + dy * dy
        if ll > 0:
            t = np.clip(((px - a[0]) * dx + (py - a[1]) * dy) / ll, 0.0, 1.0)
        else:
            t = np.zeros_like(px)
        qx = a[0] + t * dx
        qy = a[1] + t * dy
        dist = np.minimum(dist, np.sqrt((px - qx) ** 2 + (py - qy) ** 2))
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def ellipse_coverage(h, w, cx, cy, rx, ry, angle, sub):
    """Fraction of ``sub x sub`` supersamples per pixel inside a rotated ellipse."""
    offs = (np.arange(sub) + 0.5) / sub
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    ca, sa = np.cos(angle), np.sin(angle)
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    inside = (u * u + v * v <= 1.0).astype(np.float64)
    return inside.reshape(h, sub, w, sub).mean(axis=(1, 3))
