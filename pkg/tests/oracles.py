"""Independent reference implementations used only by the tests."""
import math

import numpy as np


def mc_iou(a, b, n=1_000_000, seed=0):
    """Monte-Carlo IoU of two [cx, cy, l, w, yaw] boxes by uniform point sampling."""
    rng = np.random.default_rng(seed)
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    lo = np.minimum([a[0] - ra, a[1] - ra], [b[0] - rb, b[1] - rb])
    hi = np.maximum([a[0] + ra, a[1] + ra], [b[0] + rb, b[1] + rb])
    pts = lo + rng.random((n, 2)) * (hi - lo)

    def inside(box):
        c, s = math.cos(box[4]), math.sin(box[4])
        dx, dy = pts[:, 0] - box[0], pts[:, 1] - box[1]
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (np.abs(lx) <= box[2] / 2) & (np.abs(ly) <= box[3] / 2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def shapely_iou(a, b):
    from shapely.geometry import Polygon

    def poly(box):
        c, s = math.cos(box[4]), math.sin(box[4])
        pts = []
        for lx, ly in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            x, y = lx * box[2] / 2, ly * box[3] / 2
            pts.append((box[0] + c * x - s * y, box[1] + s * x + c * y))
        return Polygon(pts)

    pa, pb = poly(a), poly(b)
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def greedy_nms_reference(boxes, scores, thr):
    """O(n^2) greedy suppression with its own IoU (shapely)."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(shapely_iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


def conv2d_naive(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, x: (C, H, W), w: (O, C, k, k)."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[oc, ic, u, v] * xp[ic, i * stride + u, j * stride + v]
                out[oc, i, j] = acc
    return out


def finite_diff_grad(f, x, h=1e-5):
    """Central differences of scalar f w.r.t. every entry of array x (in place perturbation)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def pr_all_point_ap(tp_flags, n_gt):
    """All-point interpolated AP (percentage) from score-sorted TP flags."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1 - np.asarray(tp_flags))
    rec = tp / n_gt
    prec = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    prev_r = 0.0
    for i in range(len(rec)):
        p_interp = prec[i:].max()
        ap += (rec[i] - prev_r) * p_interp
        prev_r = rec[i]
    return 100.0 * ap


def piecewise_signature(model):
    """Branch pattern of every kink in a detector's last forward pass.

    Leaky-ReLU signs, maxout winners and graph-edge activations; two parameter
    settings with the same signature lie on the same smooth piece.
    """
    from ssc3od import nn
    sig = []
    for seq in (model.encoder, model.head):
        sig += [layer._mask.copy() for layer in seq.layers if isinstance(layer, nn.LeakyReLU)]
    fusion = model.fusion
    if hasattr(fusion, "_arg"):
        sig.append(fusion._arg.copy())
    if getattr(fusion, "_cache", None) is not None and len(fusion._cache) == 4:
        sig.append(fusion._cache[1] > 0)
    return sig


def same_signature(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def smooth_fd(f, signature, arr, idx, h=1e-5):
    """Central difference at arr[idx], or None when +-h crosses a kink."""
    f()
    base = signature()
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    sig_up = signature()
    arr[idx] = old - h
    down = f()
    sig_down = signature()
    arr[idx] = old
    if not (same_signature(base, sig_up) and same_signature(base, sig_down)):
        return None
    return (up - down) / (2 * h)
