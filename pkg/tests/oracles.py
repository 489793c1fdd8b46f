"""Independent reference implementations used by the tests.

Each oracle follows the written definition directly (loops, dicts, sampling)
and shares no code with the library beyond plain data containers.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

# --- calibration -----------------------------------------------------------


def kl_bruteforce(counts, i: int, nq: int = 128, eps: float = 1e-10) -> float:
    """KL(P||Q) for one candidate threshold, built bin by bin."""
    c = np.asarray(counts, dtype=np.float64)
    if c[: i - 1].sum() == 0:
        # P and Q collapse to the same point mass; the candidate is invalid
        return math.inf
    p = c[:i].copy()
    p[i - 1] += c[i:].sum()
    src = c[:i]
    group = (np.arange(i) * nq) // i
    mass = np.bincount(group, weights=src, minlength=nq)
    nonzero = np.bincount(group, weights=(src > 0).astype(np.float64), minlength=nq)
    q = np.where(src > 0, mass[group] / np.maximum(nonzero[group], 1), 0.0)
    q = np.where((q == 0) & (p > 0), eps, q)
    p = p / p.sum()
    q = q / q.sum()
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def entropy_index_bruteforce(counts, nq: int = 128, rtol: float = 1e-9, atol: float = 1e-12) -> int:
    nb = len(counts)
    kls = [kl_bruteforce(counts, i, nq) for i in range(nq, nb + 1)]
    best = min(kls)
    if math.isinf(best):
        return nb
    for off, v in enumerate(kls):
        if v <= best + atol + rtol * best:
            return nq + off
    raise AssertionError("unreachable")


# --- graph kernels -----------------------------------------------------------


def conv2d_loops(x, w, b, stride: int, pad: int):
    """Direct (C, H, W) convolution with explicit loops, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            r, s = i * stride + u - pad, j * stride + v - pad
                            if 0 <= r < h and 0 <= s < wd:
                                acc += x[c, r, s] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def linear_loops(x, w, b):
    """y[..., o] = sum_i x[..., i] w[o, i] + b[o] over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros((flat.shape[0], w.shape[0]))
    for n in range(flat.shape[0]):
        for o in range(w.shape[0]):
            acc = 0.0 if b is None else float(b[o])
            for i in range(flat.shape[1]):
                acc += flat[n, i] * float(w[o, i])
            out[n, o] = acc
    return out.reshape(*x.shape[:-1], w.shape[0])


# --- boxes -----------------------------------------------------------------


def iou_2d_scalar(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_quadratic(boxes, scores, classes, thr, iou=iou_2d_scalar):
    """Textbook greedy NMS: repeatedly take the best remaining box."""
    remaining = list(range(len(scores)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best] or (scores[i] == scores[best] and i < best):
                best = i
        keep.append(best)
        remaining = [
            i for i in remaining if i != best and not (classes[i] == classes[best] and iou(boxes[best], boxes[i]) > thr)
        ]
    return keep


def _inside_rect(px, py, cx, cy, w, l, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = px - cx, py - cy
    along = dx * c + dy * s
    across = -dx * s + dy * c
    return (np.abs(along) <= l / 2) & (np.abs(across) <= w / 2)


def iou_bev_montecarlo(a, b, n: int = 1_000_000, seed: int = 0) -> float:
    """Sample inside rectangle ``a`` and count hits in ``b``; boxes are (cx, cy, w, l, yaw)."""
    rng = np.random.default_rng(seed)
    cx, cy, w, l, yaw = a
    u = rng.uniform(-0.5, 0.5, (n, 2)) * [l, w]
    c, s = math.cos(yaw), math.sin(yaw)
    px = cx + u[:, 0] * c - u[:, 1] * s
    py = cy + u[:, 0] * s + u[:, 1] * c
    frac = float(np.mean(_inside_rect(px, py, *b)))
    area_a, area_b = a[2] * a[3], b[2] * b[3]
    inter = frac * area_a
    return inter / (area_a + area_b - inter)


# --- pillars ---------------------------------------------------------------


def group_points(points, x_range, y_range, z_range, pillar_size):
    """dict (row, col) -> list of point indices, via a plain hash map."""
    groups = defaultdict(list)
    dx, dy = pillar_size
    h = math.ceil(round((y_range[1] - y_range[0]) / dy, 9))
    w = math.ceil(round((x_range[1] - x_range[0]) / dx, 9))
    for i, (x, y, z, _) in enumerate(np.asarray(points, dtype=np.float64)):
        if not (x_range[0] <= x < x_range[1] and y_range[0] <= y < y_range[1] and z_range[0] <= z < z_range[1]):
            continue
        col = min(int(math.floor((x - x_range[0]) / dx)), w - 1)
        row = min(int(math.floor((y - y_range[0]) / dy)), h - 1)
        groups[(row, col)].append(i)
    return groups


def pillar_features(points, ids, row, col, x_range, y_range, pillar_size):
    pts = np.asarray(points, dtype=np.float64)[ids]
    mean = pts[:, :3].mean(axis=0)
    xc = x_range[0] + (col + 0.5) * pillar_size[0]
    yc = y_range[0] + (row + 0.5) * pillar_size[1]
    return np.column_stack([pts[:, :4], pts[:, :3] - mean, pts[:, 0] - xc, pts[:, 1] - yc])


# --- image -----------------------------------------------------------------


def bilinear_pixel(src, oy: int, ox: int, out_h: int, out_w: int):
    """One output pixel of a half-pixel-centered bilinear resize."""
    h, w = src.shape[:2]

    def coord(o, n_out, n_in):
        s = (o + 0.5) * (n_in / n_out) - 0.5
        s = min(max(s, 0.0), n_in - 1)
        lo = int(math.floor(s))
        return lo, min(lo + 1, n_in - 1), s - lo

    y0, y1, fy = coord(oy, out_h, h)
    x0, x1, fx = coord(ox, out_w, w)
    vals = []
    for ch in range(src.shape[2]):
        top = float(src[y0, x0, ch]) * (1 - fx) + float(src[y0, x1, ch]) * fx
        bot = float(src[y1, x0, ch]) * (1 - fx) + float(src[y1, x1, ch]) * fx
        v = top * (1 - fy) + bot * fy
        vals.append(min(max(round(v), 0), 255))  # Python round is half-to-even
    return vals


# --- metrics ---------------------------------------------------------------


def ap_numeric(flags, num_gt: int, steps: int = 200_000) -> float:
    """Integrate the monotone precision envelope over recall numerically."""
    tp = fp = 0
    pts = []
    for f in flags:
        tp += bool(f)
        fp += not f
        pts.append((tp / num_gt, tp / (tp + fp)))
    rec = np.array([p[0] for p in pts])
    prec = np.array([p[1] for p in pts])
    r = (np.arange(steps) + 0.5) / steps
    env = np.where(rec[None, :] >= r[:, None], prec[None, :], 0.0).max(axis=1)
    return float(env.mean())


def greedy_match_reference(dets, gts, thr, iou):
    """dets: list of (frame, cls, score, box); gts: list of (frame, cls, box)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    used = set()
    flags = [False] * len(dets)
    for i in order:
        f, c, _, box = dets[i]
        best, best_iou = None, -1.0
        for j, (gf, gc, gbox) in enumerate(gts):
            if gf != f or gc != c or j in used:
                continue
            v = iou(box, gbox)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= thr:
            used.add(best)
            flags[i] = True
    return flags
