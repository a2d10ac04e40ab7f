"""Pure-Python versions of the compiled kernels in ``_core.pyx``."""
import math

import numpy as np

AREA_EPS = 1e-12


def _corners(cx, cy, l, w, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    return [
        (cx + c * hl - s * hw, cy + s * hl + c * hw),
        (cx - c * hl - s * hw, cy - s * hl + c * hw),
        (cx - c * hl + s * hw, cy - s * hl - c * hw),
        (cx + c * hl + s * hw, cy + s * hl - c * hw),
    ]


def _poly_area(pts):
    a = 0.0
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        a += x0 * y1 - x1 * y0
    return 0.5 * a


def _clip(poly, a, b):
    ax, ay = a
    bx, by = b
    out = []
    n = len(poly)
    for i in range(n):
        cx, cy = poly[i]
        dx, dy = poly[(i + 1) % n]
        dc = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        dd = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
        if dc >= 0.0:
            out.append((cx, cy))
            if dd < 0.0:
                t = dc / (dc - dd)
                out.append((cx + t * (dx - cx), cy + t * (dy - cy)))
        elif dd >= 0.0:
            t = dc / (dc - dd)
            out.append((cx + t * (dx - cx), cy + t * (dy - cy)))
    return out


def _iou(a, b):
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    if area_a <= AREA_EPS or area_b <= AREA_EPS:
        return 0.0
    ddx, ddy = a[0] - b[0], a[1] - b[1]
    ra = 0.5 * math.sqrt(a[2] * a[2] + a[3] * a[3])
    rb = 0.5 * math.sqrt(b[2] * b[2] + b[3] * b[3])
    if ddx * ddx + ddy * ddy > (ra + rb) * (ra + rb):
        return 0.0
    poly = _corners(*a[:5])
    cb = _corners(*b[:5])
    for k in range(4):
        if not poly:
            break
        poly = _clip(poly, cb[k], cb[(k + 1) % 4])
    if len(poly) < 3:
        return 0.0
    inter = abs(_poly_area(poly))
    if inter <= AREA_EPS:
        return 0.0
    union = area_a + area_b - inter
    if union <= AREA_EPS:
        return 0.0
    return min(inter / union, 1.0)


def iou_matrix(a, b):
    a = [tuple(float(v) for v in row) for row in np.asarray(a, dtype=np.float64)]
    b = [tuple(float(v) for v in row) for row in np.asarray(b, dtype=np.float64)]
    out = np.zeros((len(a), len(b)))
    for i, ra in enumerate(a):
        for j, rb in enumerate(b):
            out[i, j] = _iou(ra, rb)
    return out


def nms(boxes, scores, thr):
    boxes = [tuple(float(v) for v in row) for row in np.asarray(boxes, dtype=np.float64)]
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    suppressed = [False] * len(boxes)
    keep = []
    for i, k in enumerate(order):
        if suppressed[k]:
            continue
        keep.append(int(k))
        for j in order[i + 1:]:
            if not suppressed[j] and _iou(boxes[k], boxes[j]) > thr:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)


def raycast(ox, oy, angles, boxes, max_range):
    angles = np.asarray(angles, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    dist = np.full(len(angles), np.inf)
    hit = np.full(len(angles), -1, dtype=np.int64)
    for r, ang in enumerate(angles):
        dx, dy = math.cos(ang), math.sin(ang)
        best = max_range
        for k, (bx, by, bl, bw, byaw) in enumerate(boxes):
            c, s = math.cos(byaw), math.sin(byaw)
            lx = c * (ox - bx) + s * (oy - by)
            ly = -s * (ox - bx) + c * (oy - by)
            ldx = c * dx + s * dy
            ldy = -s * dx + c * dy
            hl, hw = 0.5 * bl, 0.5 * bw
            t0, t1 = -math.inf, math.inf
            if abs(ldx) < 1e-15:
                if lx < -hl or lx > hl:
                    continue
            else:
                ta, tb = sorted(((-hl - lx) / ldx, (hl - lx) / ldx))
                t0, t1 = max(t0, ta), min(t1, tb)
            if abs(ldy) < 1e-15:
                if ly < -hw or ly > hw:
                    continue
            else:
                ta, tb = sorted(((-hw - ly) / ldy, (hw - ly) / ldy))
                t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1 or t1 < 0.0:
                continue
            t0 = max(t0, 0.0)
            if t0 < best or (t0 == best and hit[r] == -1):
                best = t0
                hit[r] = k
        if hit[r] >= 0:
            dist[r] = best
    return dist, hit
