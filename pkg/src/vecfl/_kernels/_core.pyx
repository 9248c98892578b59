# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Arithmetic mirrors ``_fallback.py`` operation for operation."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def wedge_visibility(double sx, double sy, double hx, double hy, double cos_half,
                     bint full_circle, double range2,
                     const double[::1] cx, const double[::1] cy, const double[::1] rad):
    cdef Py_ssize_t n = cx.shape[0]
    cdef Py_ssize_t j, k
    cdef double dx, dy, d2, fx, fy, t, px, py, qx, qy
    out_arr = np.zeros(n, dtype=np.int8)
    cdef signed char[::1] out = out_arr
    # occluders whose disc contains the sensor are the ego body and are skipped
    ego_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] ego = ego_arr
    for k in range(n):
        fx = cx[k] - sx
        fy = cy[k] - sy
        if fx * fx + fy * fy < rad[k] * rad[k]:
            ego[k] = 1
    for j in range(n):
        dx = cx[j] - sx
        dy = cy[j] - sy
        d2 = dx * dx + dy * dy
        if d2 > range2:
            continue
        if not full_circle and d2 > 0.0:
            if dx * hx + dy * hy < sqrt(d2) * cos_half:
                continue
        out[j] = 1
        if d2 == 0.0:
            continue
        for k in range(n):
            if k == j or ego[k]:
                continue
            fx = cx[k] - sx
            fy = cy[k] - sy
            t = (fx * dx + fy * dy) / d2
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            px = sx + t * dx
            py = sy + t * dy
            qx = cx[k] - px
            qy = cy[k] - py
            if qx * qx + qy * qy < rad[k] * rad[k]:
                out[j] = 2
                break
    return out_arr


def count_within(const double[::1] px, const double[::1] py, const double[::1] r2,
                 const double[::1] ex, const double[::1] ey):
    cdef Py_ssize_t p = px.shape[0]
    cdef Py_ssize_t m = ex.shape[0]
    cdef Py_ssize_t i, e
    cdef long long c
    cdef double dx, dy
    out_arr = np.zeros(p, dtype=np.int64)
    cdef long long[::1] out = out_arr
    for i in range(p):
        c = 0
        for e in range(m):
            dx = ex[e] - px[i]
            dy = ey[e] - py[i]
            if dx * dx + dy * dy <= r2[i]:
                c += 1
        out[i] = c
    return out_arr


def cover_matrix(const double[::1] px, const double[::1] py, const double[::1] r2,
                 const double[::1] ex, const double[::1] ey):
    cdef Py_ssize_t p = px.shape[0]
    cdef Py_ssize_t m = ex.shape[0]
    cdef Py_ssize_t i, e
    cdef double dx, dy
    out_arr = np.zeros((p, m), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    for i in range(p):
        for e in range(m):
            dx = ex[e] - px[i]
            dy = ey[e] - py[i]
            if dx * dx + dy * dy <= r2[i]:
                out[i, e] = 1
    return out_arr


def greedy_cover(const unsigned char[:, ::1] cover, const long long[::1] weight,
                 const double[::1] cost, const long long[::1] group,
                 double budget, bint by_ratio):
    cdef Py_ssize_t p = cover.shape[0]
    cdef Py_ssize_t m = cover.shape[1]
    cdef Py_ssize_t i, e, best
    cdef double spent = 0.0
    cdef long long gain, best_gain
    cdef double score, best_score
    covered_arr = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[::1] covered = covered_arr
    used_arr = np.zeros(p, dtype=np.uint8)
    cdef unsigned char[::1] used = used_arr
    chosen = []
    while True:
        best = -1
        best_score = 0.0
        best_gain = 0
        for i in range(p):
            if used[i] or spent + cost[i] > budget + 1e-9:
                continue
            gain = 0
            for e in range(m):
                if cover[i, e] and not covered[e]:
                    gain += weight[e]
            if gain <= 0:
                continue
            score = <double>gain / cost[i] if by_ratio else <double>gain
            if best < 0 or score > best_score:
                best = i
                best_score = score
                best_gain = gain
        if best < 0:
            break
        chosen.append(best)
        spent += cost[best]
        for i in range(p):
            if group[i] == group[best]:
                used[i] = 1
        for e in range(m):
            if cover[best, e]:
                covered[e] = 1
    return np.asarray(chosen, dtype=np.int64)
