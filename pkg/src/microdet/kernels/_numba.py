"""numba-compiled twins of the kernels in ``_numpy.py``."""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((n, c * kh * kw, ho * wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i
                        for ox in range(wo):
                            out[b, row, oy * wo + ox] = xp[b, ch, iy, ox * stride + j]
    return out


@njit(cache=True)
def col2im(cols, xp_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = xp_shape
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ch in range(c):
                    for oy in range(ho):
                        iy = oy * stride + i
                        for ox in range(wo):
                            out[b, ch, iy, ox * stride + j] += cols[b, ch, i, j, oy, ox]
    return out


@njit(cache=True)
def maxpool_forward(xp, k, stride, ho, wo):
    n, c, hp, wp = xp.shape
    out = np.empty((n, c, ho, wo), dtype=xp.dtype)
    flat = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    by = oy * stride
                    bx = ox * stride
                    best = xp[b, ch, by, bx]
                    arg = by * wp + bx
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, ch, by + i, bx + j]
                            if v > best:
                                best = v
                                arg = (by + i) * wp + bx + j
                    out[b, ch, oy, ox] = best
                    flat[b, ch, oy, ox] = arg
    return out, flat


@njit(cache=True)
def maxpool_backward(g, flat, xp_shape):
    n, c, hp, wp = xp_shape
    out = np.zeros((n, c, hp * wp), dtype=g.dtype)
    ho, wo = g.shape[2], g.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    out[b, ch, flat[b, ch, oy, ox]] += g[b, ch, oy, ox]
    return out.reshape(n, c, hp, wp)


@njit(cache=True)
def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@njit(cache=True)
def nms(boxes, order, iou_thresh):
    m = order.shape[0]
    suppressed = np.zeros(boxes.shape[0], dtype=np.bool_)
    keep = np.empty(m, dtype=np.int64)
    nk = 0
    for pos in range(m):
        i = order[pos]
        if suppressed[i]:
            continue
        keep[nk] = i
        nk += 1
        for q in range(pos + 1, m):
            j = order[q]
            if not suppressed[j] and _iou(boxes[i], boxes[j]) > iou_thresh:
                suppressed[j] = True
    return keep[:nk]


@njit(cache=True)
def polyline_coverage(h, w, pts, half_width):
    out = np.zeros((h, w))
    for y in range(h):
        py = y + 0.5
        for x in range(w):
            px = x + 0.5
            best = np.inf
            for s in range(pts.shape[0] - 1):
                ax, ay = pts[s, 0], pts[s, 1]
                dx = pts[s + 1, 0] - ax
                dy = pts[s + 1, 1] - ay
                ll = dx * dx + dy * dy
                t = 0.0
                if ll > 0:
                    t = ((px - ax) * dx + (py - ay) * dy) / ll
                    t = min(max(t, 0.0), 1.0)
                qx = ax + t * dx
                qy = ay + t * dy
                d = np.sqrt((px - qx) ** 2 + (py - qy) ** 2)
                if d < best:
                    best = d
            out[y, x] = min(max(half_width + 0.5 - best, 0.0), 1.0)
    return out


@njit(cache=True)
def ellipse_coverage(h, w, cx, cy, rx, ry, angle, sub):
    out = np.zeros((h, w))
    ca, sa = np.cos(angle), np.sin(angle)
    for y in range(h):
        for x in range(w):
            cnt = 0
            for si in range(sub):
                dy = y + (si + 0.5) / sub - cy
                for sj in range(sub):
                    dx = x + (sj + 0.5) / sub - cx
                    u = (dx * ca + dy * sa) / rx
                    v = (-dx * sa + dy * ca) / ry
                    if u * u + v * v <= 1.0:
                        cnt += 1
            out[y, x] = cnt / (sub * sub)
    return out
