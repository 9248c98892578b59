"""Pure numpy versions of the compiled kernels.

Every expression is evaluated in the same order as in ``_core.pyx`` so both
backends return identical arrays.
"""
import numpy as np


def wedge_visibility(sx, sy, hx, hy, cos_half, full_circle, range2, cx, cy, rad):
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    rad = np.asarray(rad, dtype=np.float64)
    n = cx.shape[0]
    out = np.zeros(n, dtype=np.int8)
    if n == 0:
        return out
    fx = cx - sx
    fy = cy - sy
    rr = rad * rad
    ego = fx * fx + fy * fy < rr
    for j in range(n):
        dx = cx[j] - sx
        dy = cy[j] - sy
        d2 = dx * dx + dy * dy
        if d2 > range2:
            continue
        if not full_circle and d2 > 0.0:
            if dx * hx + dy * hy < np.sqrt(d2) * cos_half:
                continue
        out[j] = 1
        if d2 == 0.0:
            continue
        t = np.clip((fx * dx + fy * dy) / d2, 0.0, 1.0)
        qx = cx - (sx + t * dx)
        qy = cy - (sy + t * dy)
        hit = qx * qx + qy * qy < rr
        hit[j] = False
        hit &= ~ego
        if hit.any():
            out[j] = 2
    return out


def count_within(px, py, r2, ex, ey):
    return cover_matrix(px, py, r2, ex, ey).sum(axis=1, dtype=np.int64)


def cover_matrix(px, py, r2, ex, ey):
    px = np.asarray(px, dtype=np.float64)[:, None]
    py = np.asarray(py, dtype=np.float64)[:, None]
    r2 = np.asarray(r2, dtype=np.float64)[:, None]
    dx = np.asarray(ex, dtype=np.float64)[None, :] - px
    dy = np.asarray(ey, dtype=np.float64)[None, :] - py
    return (dx * dx + dy * dy <= r2).astype(np.uint8)


def greedy_cover(cover, weight, cost, group, budget, by_ratio):
    cover = np.asarray(cover, dtype=bool)
    weight = np.asarray(weight, dtype=np.int64)
    cost = np.asarray(cost, dtype=np.float64)
    group = np.asarray(group, dtype=np.int64)
    p, m = cover.shape
    covered = np.zeros(m, dtype=bool)
    used = np.zeros(p, dtype=bool)
    spent = 0.0
    chosen = []
    while True:
        open_ = ~used & ~(spent + cost > budget + 1e-9)
        if not open_.any():
            break
        gains = (cover[:, ~covered] * weight[~covered]).sum(axis=1, dtype=np.int64)
        best = -1
        best_score = 0.0
        for i in np.flatnonzero(open_ & (gains > 0)):
            score = float(gains[i]) / cost[i] if by_ratio else float(gains[i])
            if best < 0 or score > best_score:
                best, best_score = int(i), score
        if best < 0:
            break
        chosen.append(best)
        spent += cost[best]
        used |= group == group[best]
        covered |= cover[best]
    return np.asarray(chosen, dtype=np.int64)
