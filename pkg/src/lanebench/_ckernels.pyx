# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled simulation kernels; drop-in replacement for ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport pow, sqrt, fabs, INFINITY

cnp.import_array()

NAME = "cython"


cdef inline double _idm(double v, double v0, double gap, double lead_speed, bint has_leader,
                        double a_max, double b, double s0, double T, double delta,
                        double b_hard, double sqrt_ab) nogil:
    cdef double free = 1.0 - pow(v / v0, delta)
    cdef double dyn, s_star, a
    if has_leader:
        if gap <= 0:
            return -b_hard
        dyn = v * T + v * (v - lead_speed) / (2.0 * sqrt_ab)
        if dyn < 0.0:
            dyn = 0.0
        s_star = s0 + dyn
        a = a_max * (free - (s_star / gap) * (s_star / gap))
    else:
        a = a_max * (free - 0.0)
    if a < -b_hard:
        a = -b_hard
    if a > a_max:
        a = a_max
    return a


def idm_accel(speed, v0, gap, lead_speed, has_leader, double a_max, double b, double s0,
              double T, double delta, double b_hard):
    cdef double[::1] sp = np.ascontiguousarray(speed, dtype=np.float64)
    cdef Py_ssize_t n = sp.shape[0]
    cdef double[::1] v0v = np.ascontiguousarray(np.broadcast_to(v0, (n,)), dtype=np.float64)
    cdef double[::1] gp = np.ascontiguousarray(np.broadcast_to(gap, (n,)), dtype=np.float64)
    cdef double[::1] ls = np.ascontiguousarray(np.broadcast_to(lead_speed, (n,)), dtype=np.float64)
    cdef cnp.uint8_t[::1] hl = np.ascontiguousarray(np.broadcast_to(has_leader, (n,)), dtype=np.uint8)
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double sqrt_ab = sqrt(a_max * b)
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = _idm(sp[i], v0v[i], gp[i], ls[i], hl[i] != 0, a_max, b, s0, T, delta, b_hard, sqrt_ab)
    return out


cdef void _leaders(const double[::1] s, const cnp.int64_t[::1] lane, const cnp.int64_t[::1] lc_dir,
                   const double[::1] lc_progress, const double[::1] length,
                   cnp.int64_t[::1] leader, double[::1] gap) nogil:
    cdef Py_ssize_t n = s.shape[0]
    cdef Py_ssize_t i, j, best
    cdef long own, lo_j, hi_j
    cdef double d, bestd
    for i in range(n):
        own = lane[i]
        if lc_dir[i] != 0 and lc_progress[i] >= 0.5:
            own = lane[i] + lc_dir[i]
        best = -1
        bestd = INFINITY
        for j in range(n):
            if s[j] <= s[i]:
                continue
            lo_j = lane[j] + (lc_dir[j] if lc_dir[j] < 0 else 0)
            hi_j = lane[j] + (lc_dir[j] if lc_dir[j] > 0 else 0)
            if own < lo_j or own > hi_j:
                continue
            d = s[j] - s[i]
            if d < bestd:
                bestd = d
                best = j
        leader[i] = best
        if best >= 0:
            gap[i] = bestd - 0.5 * (length[i] + length[best])
        else:
            gap[i] = INFINITY


def control_leaders(s, lane, lc_dir, lc_progress, length):
    cdef const double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    n = sv.shape[0]
    leader = np.empty(n, dtype=np.int64)
    gap = np.empty(n, dtype=np.float64)
    _leaders(sv, np.ascontiguousarray(lane, dtype=np.int64), np.ascontiguousarray(lc_dir, dtype=np.int64),
             np.ascontiguousarray(lc_progress, dtype=np.float64),
             np.ascontiguousarray(length, dtype=np.float64), leader, gap)
    return leader, gap


def idm_controls(s, speed, lane, lc_dir, lc_progress, length, v0, idm_mask, double a_max, double b,
                 double s0, double T, double delta, double b_hard):
    cdef const double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef const double[::1] sp = np.ascontiguousarray(speed, dtype=np.float64)
    cdef const double[::1] v0v = np.ascontiguousarray(v0, dtype=np.float64)
    cdef const cnp.uint8_t[::1] mask = np.ascontiguousarray(idm_mask, dtype=np.uint8)
    cdef Py_ssize_t n = sv.shape[0]
    leader_arr = np.empty(n, dtype=np.int64)
    gap_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] leader = leader_arr
    cdef double[::1] gap = gap_arr
    _leaders(sv, np.ascontiguousarray(lane, dtype=np.int64), np.ascontiguousarray(lc_dir, dtype=np.int64),
             np.ascontiguousarray(lc_progress, dtype=np.float64),
             np.ascontiguousarray(length, dtype=np.float64), leader, gap)
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double sqrt_ab = sqrt(a_max * b)
    cdef Py_ssize_t i
    for i in range(n):
        if mask[i] == 0:
            continue
        if leader[i] >= 0:
            o[i] = _idm(sp[i], v0v[i], gap[i], sp[leader[i]], True, a_max, b, s0, T, delta, b_hard, sqrt_ab)
        else:
            o[i] = _idm(sp[i], v0v[i], gap[i], 0.0, False, a_max, b, s0, T, delta, b_hard, sqrt_ab)
    return out


def integrate(s, y, speed, accel, lane, lc_dir, lc_progress, double dt, double lc_duration,
              double lane_width):
    cdef const double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] sp = np.ascontiguousarray(speed, dtype=np.float64)
    cdef const double[::1] ac = np.ascontiguousarray(accel, dtype=np.float64)
    cdef const cnp.int64_t[::1] ln = np.ascontiguousarray(lane, dtype=np.int64)
    cdef const cnp.int64_t[::1] dr = np.ascontiguousarray(lc_dir, dtype=np.int64)
    cdef const double[::1] pr = np.ascontiguousarray(lc_progress, dtype=np.float64)
    cdef Py_ssize_t n = sv.shape[0]
    s_out = np.empty(n); y_out = np.empty(n); v_out = np.empty(n); a_out = np.empty(n)
    p_out = np.empty(n)
    lane_out = np.empty(n, dtype=np.int64); dir_out = np.empty(n, dtype=np.int64)
    cdef double[::1] so = s_out, yo = y_out, vo = v_out, ao = a_out, po = p_out
    cdef cnp.int64_t[::1] lo = lane_out, do = dir_out
    cdef Py_ssize_t i
    cdef double v, p
    for i in range(n):
        v = sp[i] + ac[i] * dt
        if v < 0:
            so[i] = sv[i] + sp[i] * sp[i] / (-2.0 * ac[i])
            v = 0.0
        else:
            so[i] = sv[i] + sp[i] * dt + 0.5 * ac[i] * dt * dt
        vo[i] = v
        ao[i] = (v - sp[i]) / dt
        if dr[i] != 0:
            p = pr[i] + dt / lc_duration
            if p > 1.0:
                p = 1.0
            if p >= 1.0 - 1e-9:
                lo[i] = ln[i] + dr[i]
                do[i] = 0
                po[i] = 0.0
            else:
                lo[i] = ln[i]
                do[i] = dr[i]
                po[i] = p
            yo[i] = (lo[i] + 0.5) * lane_width + do[i] * lane_width * po[i]
        else:
            lo[i] = ln[i]
            do[i] = 0
            po[i] = 0.0
            yo[i] = yv[i]
    return s_out, y_out, v_out, a_out, lane_out, dir_out, p_out


def collision_pairs(s, y, length, width):
    cdef const double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] L = np.ascontiguousarray(length, dtype=np.float64)
    cdef const double[::1] W = np.ascontiguousarray(width, dtype=np.float64)
    cdef Py_ssize_t n = sv.shape[0]
    cdef Py_ssize_t i, j
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if fabs(sv[i] - sv[j]) < 0.5 * (L[i] + L[j]) and fabs(yv[i] - yv[j]) < 0.5 * (W[i] + W[j]):
                pairs.append((i, j))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


cdef inline void _fill(cnp.uint8_t[:, :, ::1] img, Py_ssize_t r, Py_ssize_t c,
                       cnp.uint8_t red, cnp.uint8_t green, cnp.uint8_t blue) nogil:
    img[r, c, 0] = red
    img[r, c, 1] = green
    img[r, c, 2] = blue


def rasterize(s, y, length, width, Py_ssize_t ego_index, int lane_count, double lane_width,
              double rear, double front, int size):
    cdef const double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] L = np.ascontiguousarray(length, dtype=np.float64)
    cdef const double[::1] W = np.ascontiguousarray(width, dtype=np.float64)
    out = np.zeros((size, size, 3), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] img = out
    cdef double row_scale = (front + rear) / size
    cdef double span = (lane_count + 2) * lane_width
    cdef double y_max = (lane_count + 1) * lane_width
    cdef double col_scale = span / size
    cdef double road_w = lane_count * lane_width
    cdef Py_ssize_t n = sv.shape[0]
    cdef Py_ssize_t r, c, k, kk
    cdef double yc, rc, ego_s = sv[ego_index]
    cdef cnp.uint8_t g0, g1, g2
    rows = np.empty(size)
    cols = np.empty(size)
    cdef double[::1] rv = rows, cv = cols
    for r in range(size):
        rv[r] = front - (r + 0.5) * row_scale
        cv[r] = y_max - (r + 0.5) * col_scale
    for c in range(size):
        if cv[c] <= 0.0 or cv[c] >= road_w:
            for r in range(size):
                _fill(img, r, c, 128, 128, 128)
    for k in range(lane_count + 1):
        c = <Py_ssize_t>((y_max - k * lane_width) / span * size)
        if c < 0:
            c = 0
        if c > size - 1:
            c = size - 1
        for r in range(size):
            _fill(img, r, c, 255, 0, 0)
    for kk in range(n):
        # ego drawn last so it stays on top
        if kk < n - 1:
            k = kk if kk < ego_index else kk + 1
        else:
            k = ego_index
        if k == ego_index:
            g0 = 0; g1 = 0; g2 = 255
        else:
            g0 = 0; g1 = 255; g2 = 0
        for r in range(size):
            if not fabs(rv[r] - (sv[k] - ego_s)) < 0.5 * L[k]:
                continue
            for c in range(size):
                if fabs(cv[c] - yv[k]) < 0.5 * W[k]:
                    _fill(img, r, c, g0, g1, g2)
    return out
