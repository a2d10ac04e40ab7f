# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for box overlap, suppression and BEV ray casting.

Every function here has a line-for-line twin in ``_fallback.py``; the two
must return identical results (up to float round-off in the last ulp).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, fabs, sqrt, INFINITY

cnp.import_array()

DEF MAXPTS = 16
cdef double AREA_EPS = 1e-12


cdef inline void _corners(double cx, double cy, double l, double w, double yaw,
                          double* xs, double* ys) noexcept nogil:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double hl = 0.5 * l, hw = 0.5 * w
    # counter-clockwise from the front-left corner
    xs[0] = cx + c * hl - s * hw
    ys[0] = cy + s * hl + c * hw
    xs[1] = cx - c * hl - s * hw
    ys[1] = cy - s * hl + c * hw
    xs[2] = cx - c * hl + s * hw
    ys[2] = cy - s * hl - c * hw
    xs[3] = cx + c * hl + s * hw
    ys[3] = cy + s * hl - c * hw


cdef inline double _poly_area(double* xs, double* ys, int n) noexcept nogil:
    cdef double a = 0.0
    cdef int i, j
    for i in range(n):
        j = (i + 1) % n
        a += xs[i] * ys[j] - xs[j] * ys[i]
    return 0.5 * a


cdef int _clip(double* px, double* py, int n,
               double ax, double ay, double bx, double by,
               double* ox, double* oy) noexcept nogil:
    # keep the part of polygon p left of (or on) the directed edge a->b
    cdef int i, m = 0
    cdef double cx, cy, dx, dy, dc, dd, t
    if n == 0:
        return 0
    for i in range(n):
        cx = px[i]
        cy = py[i]
        dx = px[(i + 1) % n]
        dy = py[(i + 1) % n]
        dc = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        dd = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
        if dc >= 0.0:
            ox[m] = cx
            oy[m] = cy
            m += 1
            if dd < 0.0:
                t = dc / (dc - dd)
                ox[m] = cx + t * (dx - cx)
                oy[m] = cy + t * (dy - cy)
                m += 1
        elif dd >= 0.0:
            t = dc / (dc - dd)
            ox[m] = cx + t * (dx - cx)
            oy[m] = cy + t * (dy - cy)
            m += 1
    return m


cdef double _iou(const double[:] a, const double[:] b) noexcept nogil:
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef double px[MAXPTS]
    cdef double py[MAXPTS]
    cdef double qx[MAXPTS]
    cdef double qy[MAXPTS]
    cdef int n, k, i
    cdef double area_a = a[2] * a[3]
    cdef double area_b = b[2] * b[3]
    cdef double inter, union
    if area_a <= AREA_EPS or area_b <= AREA_EPS:
        return 0.0
    # cheap reject on circumscribed circles
    cdef double ddx = a[0] - b[0], ddy = a[1] - b[1]
    cdef double ra = 0.5 * sqrt(a[2] * a[2] + a[3] * a[3])
    cdef double rb = 0.5 * sqrt(b[2] * b[2] + b[3] * b[3])
    if ddx * ddx + ddy * ddy > (ra + rb) * (ra + rb):
        return 0.0
    _corners(a[0], a[1], a[2], a[3], a[4], ax, ay)
    _corners(b[0], b[1], b[2], b[3], b[4], bx, by)
    for i in range(4):
        px[i] = ax[i]
        py[i] = ay[i]
    n = 4
    for k in range(4):
        if k % 2 == 0:
            n = _clip(px, py, n, bx[k], by[k], bx[(k + 1) % 4], by[(k + 1) % 4], qx, qy)
        else:
            n = _clip(qx, qy, n, bx[k], by[k], bx[(k + 1) % 4], by[(k + 1) % 4], px, py)
    # four clips: result ends in px/py
    if n < 3:
        return 0.0
    inter = fabs(_poly_area(px, py, n))
    if inter <= AREA_EPS:
        return 0.0
    union = area_a + area_b - inter
    if union <= AREA_EPS:
        return 0.0
    inter = inter / union
    if inter > 1.0:
        return 1.0
    return inter


def iou_matrix(const double[:, :] a, const double[:, :] b):
    """Pairwise BEV IoU of (N, 5) and (M, 5) arrays of [cx, cy, l, w, yaw]."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, :] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(a[i], b[j])
    return out


def nms(const double[:, :] boxes, scores, double thr):
    """Greedy suppression; returns kept indices in descending-score order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    cdef Py_ssize_t n = boxes.shape[0], i, j, k
    cdef cnp.int64_t[:] idx = order.astype(np.int64)
    suppressed = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[:] sup = suppressed
    keep = []
    for i in range(n):
        k = idx[i]
        if sup[k]:
            continue
        keep.append(k)
        with nogil:
            for j in range(i + 1, n):
                if not sup[idx[j]] and _iou(boxes[k], boxes[idx[j]]) > thr:
                    sup[idx[j]] = 1
    return np.asarray(keep, dtype=np.int64)


def raycast(double ox, double oy, const double[:] angles,
            const double[:, :] boxes, double max_range):
    """First-hit distance of each ray against oriented rectangles.

    Returns (dist, hit) where dist is inf and hit is -1 for rays that miss
    every box within max_range. Rays starting inside a box hit it at 0.
    """
    cdef Py_ssize_t nr = angles.shape[0], nb = boxes.shape[0], r, k
    dist = np.full(nr, np.inf)
    hit = np.full(nr, -1, dtype=np.int64)
    cdef double[:] d = dist
    cdef cnp.int64_t[:] h = hit
    cdef double dx, dy, c, s, lx, ly, ldx, ldy, hl, hw, t0, t1, ta, tb, best
    with nogil:
        for r in range(nr):
            dx = cos(angles[r])
            dy = sin(angles[r])
            best = max_range
            for k in range(nb):
                c = cos(boxes[k, 4])
                s = sin(boxes[k, 4])
                # ray in the box frame
                lx = c * (ox - boxes[k, 0]) + s * (oy - boxes[k, 1])
                ly = -s * (ox - boxes[k, 0]) + c * (oy - boxes[k, 1])
                ldx = c * dx + s * dy
                ldy = -s * dx + c * dy
                hl = 0.5 * boxes[k, 2]
                hw = 0.5 * boxes[k, 3]
                t0 = -INFINITY
                t1 = INFINITY
                if fabs(ldx) < 1e-15:
                    if lx < -hl or lx > hl:
                        continue
                else:
                    ta = (-hl - lx) / ldx
                    tb = (hl - lx) / ldx
                    if ta > tb:
                        ta, tb = tb, ta
                    t0 = ta if ta > t0 else t0
                    t1 = tb if tb < t1 else t1
                if fabs(ldy) < 1e-15:
                    if ly < -hw or ly > hw:
                        continue
                else:
                    ta = (-hw - ly) / ldy
                    tb = (hw - ly) / ldy
                    if ta > tb:
                        ta, tb = tb, ta
                    t0 = ta if ta > t0 else t0
                    t1 = tb if tb < t1 else t1
                if t0 > t1 or t1 < 0.0:
                    continue
                if t0 < 0.0:
                    t0 = 0.0
                if t0 < best or (t0 == best and h[r] == -1):
                    best = t0
                    h[r] = k
            if h[r] >= 0:
                d[r] = best
    return dist, hit
