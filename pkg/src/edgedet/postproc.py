"""Detection post-processing: anchors, box decoding, IoU, score filtering and NMS."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


# --- boxes -----------------------------------------------------------------


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"degenerate Box2D {self}")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def normalize_yaw(theta):
    """Wrap angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    out = theta - 2 * np.pi * np.ceil((theta - np.pi) / (2 * np.pi))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Box3D:
    """Upright 3D box. ``l`` runs along the heading ``yaw``, ``w`` across it."""

    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"Box3D extents must be positive: {self}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.yaw]

    def bev_corners(self) -> np.ndarray:
        return rect_corners(self.cx, self.cy, self.w, self.l, self.yaw)


@dataclass(frozen=True)
class Detection:
    box: Box2D | Box3D
    score: float
    class_id: int
    frame: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


def box_from_list(values: Sequence[float]) -> Box2D | Box3D:
    if len(values) == 4:
        return Box2D(*map(float, values))
    if len(values) == 7:
        return Box3D(*map(float, values))
    raise ValueError(f"boxes have 4 (2D) or 7 (3D) values, got {len(values)}")


# --- anchors ---------------------------------------------------------------


@dataclass(frozen=True)
class AnchorConfig2D:
    strides: tuple[int, ...] = (8, 16)
    sizes: tuple[float, ...] = (32.0, 64.0)
    scales: tuple[float, ...] = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not (self.strides and self.scales and self.ratios):
            raise ValueError("anchor config needs strides, scales and ratios")
        if len(self.sizes) != len(self.strides):
            raise ValueError("one base size per pyramid stride is required")

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def shapes(self, level: int) -> list[tuple[float, float]]:
        """(w, h) per anchor of one cell, ratio-major then scale; ratio is h/w."""
        size = self.sizes[level]
        return [
            (size * s / math.sqrt(r), size * s * math.sqrt(r)) for r in self.ratios for s in self.scales
        ]


def level_grids(resolution: tuple[int, int], cfg: AnchorConfig2D) -> list[tuple[int, int]]:
    h, w = resolution
    grids = []
    for s in cfg.strides:
        if h % s or w % s:
            raise ValueError(f"stride {s} does not divide resolution {h}x{w}")
        grids.append((h // s, w // s))
    return grids


def generate_anchors_2d(
    resolution: tuple[int, int], cfg: AnchorConfig2D, origin: tuple[float, float] = (0.0, 0.0)
) -> Tensor:
    """(A, 4) anchors as (cx, cy, w, h), level by level, cells row-major."""
    out = []
    for level, (gh, gw) in enumerate(level_grids(resolution, cfg)):
        s = cfg.strides[level]
        cy = (np.arange(gh, dtype=np.float64) + 0.5) * s + origin[1]
        cx = (np.arange(gw, dtype=np.float64) + 0.5) * s + origin[0]
        wh = np.array(cfg.shapes(level), dtype=np.float64)
        grid = np.empty((gh, gw, len(wh), 4))
        grid[..., 0] = cx[None, :, None]
        grid[..., 1] = cy[:, None, None]
        grid[..., 2] = wh[:, 0]
        grid[..., 3] = wh[:, 1]
        out.append(grid.reshape(-1, 4))
    return Tensor(np.concatenate(out).astype(np.float32))


@dataclass(frozen=True)
class AnchorConfig3D:
    x_range: tuple[float, float] = (0.0, 69.12)
    y_range: tuple[float, float] = (-39.68, 39.68)
    feature_size: tuple[int, int] = (248, 216)  # (rows along y, cols along x)
    sizes: tuple[tuple[float, float, float], ...] = ((1.6, 3.9, 1.56), (0.6, 0.8, 1.73), (0.6, 1.76, 1.73))
    z_centers: tuple[float, ...] = (-1.78, -0.6, -0.6)
    rotations: tuple[float, ...] = (0.0, math.pi / 2)

    def __post_init__(self):
        if not (self.sizes and self.rotations):
            raise ValueError("3D anchor config needs sizes and rotations")
        if len(self.z_centers) != len(self.sizes):
            raise ValueError("one z center per anchor size is required")
        if min(self.feature_size) < 1:
            raise ValueError("feature map must be at least 1x1")

    @property
    def per_cell(self) -> int:
        return len(self.sizes) * len(self.rotations)


def generate_anchors_3d(cfg: AnchorConfig3D) -> Tensor:
    """(A, 7) anchors (cx, cy, cz, w, l, h, yaw): cells row-major, then size, then rotation."""
    rows, cols = cfg.feature_size
    dx = (cfg.x_range[1] - cfg.x_range[0]) / cols
    dy = (cfg.y_range[1] - cfg.y_range[0]) / rows
    cx = cfg.x_range[0] + (np.arange(cols, dtype=np.float64) + 0.5) * dx
    cy = cfg.y_range[0] + (np.arange(rows, dtype=np.float64) + 0.5) * dy
    per = [
        (z, w, l, h, rot)
        for (w, l, h), z in zip(cfg.sizes, cfg.z_centers)
        for rot in cfg.rotations
    ]
    grid = np.empty((rows, cols, len(per), 7))
    grid[..., 0] = cx[None, :, None]
    grid[..., 1] = cy[:, None, None]
    grid[..., 2:] = np.array(per)[:, [0, 1, 2, 3, 4]]
    return Tensor(grid.reshape(-1, 7).astype(np.float32))


# --- decoding --------------------------------------------------------------


@dataclass
class Decoded:
    boxes: np.ndarray  # (M, 4) corners or (M, 7)
    rows: np.ndarray  # anchor row of each box
    dropped: int = 0


def _finite_rows(*arrays: np.ndarray) -> np.ndarray:
    ok = np.ones(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        ok &= np.all(np.isfinite(a), axis=1)
    return ok


def decode_2d(anchors, deltas, image_size: tuple[int, int] | None = None, rows=None) -> Decoded:
    """Apply (dx, dy, dw, dh) to (cx, cy, w, h) anchors and return clipped corners.

    Non-finite delta rows are dropped and counted in ``Decoded.dropped``.
    """
    a = np.asarray(anchors.numpy() if isinstance(anchors, Tensor) else anchors, dtype=np.float64)
    d = np.asarray(deltas.numpy() if isinstance(deltas, Tensor) else deltas, dtype=np.float64)
    if a.shape != d.shape or a.ndim != 2 or a.shape[1] != 4:
        raise ValueError(f"anchor/delta shape mismatch: {a.shape} vs {d.shape}")
    rows = np.arange(len(a)) if rows is None else np.asarray(rows)
    with np.errstate(over="ignore", invalid="ignore"):
        cx = a[:, 0] + d[:, 0] * a[:, 2]
        cy = a[:, 1] + d[:, 1] * a[:, 3]
        w = a[:, 2] * np.exp(d[:, 2])
        h = a[:, 3] * np.exp(d[:, 3])
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    ok = _finite_rows(d, boxes)
    dropped = int(len(ok) - ok.sum())
    if dropped:
        log.warning("decode_2d dropped %d rows with non-finite deltas", dropped)
    boxes = boxes[ok]
    if image_size is not None:
        hgt, wid = image_size
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, wid)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, hgt)
    return Decoded(boxes, rows[ok], dropped)


def encode_2d(anchors, boxes) -> np.ndarray:
    a = np.asarray(anchors.numpy() if isinstance(anchors, Tensor) else anchors, dtype=np.float64)
    b = np.asarray(boxes, dtype=np.float64)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    cx = b[:, 0] + w / 2
    cy = b[:, 1] + h / 2
    return np.stack(
        [(cx - a[:, 0]) / a[:, 2], (cy - a[:, 1]) / a[:, 3], np.log(w / a[:, 2]), np.log(h / a[:, 3])],
        axis=1,
    )


def direction_bin(theta) -> np.ndarray:
    """0 for headings in [0, pi) modulo 2*pi, 1 for [pi, 2*pi)."""
    t = np.mod(np.asarray(theta, dtype=np.float64), 2 * np.pi)
    return (t >= np.pi).astype(np.int64)


def decode_3d(anchors, deltas, dir_logits, rows=None) -> Decoded:
    """Residual 3D decode with a two-bin heading classifier.

    Centers move in units of the anchor BEV diagonal (z in anchor heights),
    sizes scale by ``exp``, and the decoded yaw is turned by pi whenever the
    direction classifier disagrees with its half-circle.
    """
    a = np.asarray(anchors.numpy() if isinstance(anchors, Tensor) else anchors, dtype=np.float64)
    d = np.asarray(deltas.numpy() if isinstance(deltas, Tensor) else deltas, dtype=np.float64)
    dl = np.asarray(dir_logits.numpy() if isinstance(dir_logits, Tensor) else dir_logits, dtype=np.float64)
    if a.shape != d.shape or a.ndim != 2 or a.shape[1] != 7 or dl.shape != (len(a), 2):
        raise ValueError(f"shape mismatch: anchors {a.shape}, deltas {d.shape}, dir {dl.shape}")
    rows = np.arange(len(a)) if rows is None else np.asarray(rows)
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.empty_like(a)
        out[:, 0] = a[:, 0] + d[:, 0] * diag
        out[:, 1] = a[:, 1] + d[:, 1] * diag
        out[:, 2] = a[:, 2] + d[:, 2] * a[:, 5]
        out[:, 3:6] = a[:, 3:6] * np.exp(d[:, 3:6])
        yaw = a[:, 6] + d[:, 6]
        out[:, 6] = yaw
    ok = _finite_rows(d, dl, out)
    want = np.argmax(dl, axis=1)
    flip = ok & (want != direction_bin(np.where(ok, yaw, 0.0)))
    yaw = np.where(flip, yaw + np.pi, yaw)
    out[:, 6] = normalize_yaw(np.where(ok, yaw, 0.0))
    dropped = int(len(ok) - ok.sum())
    if dropped:
        log.warning("decode_3d dropped %d rows with non-finite outputs", dropped)
    return Decoded(out[ok], rows[ok], dropped)


def encode_3d(anchors, boxes) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of ``decode_3d``: (deltas, direction targets)."""
    a = np.asarray(anchors.numpy() if isinstance(anchors, Tensor) else anchors, dtype=np.float64)
    b = np.asarray(boxes, dtype=np.float64)
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    d = np.empty_like(a)
    d[:, 0] = (b[:, 0] - a[:, 0]) / diag
    d[:, 1] = (b[:, 1] - a[:, 1]) / diag
    d[:, 2] = (b[:, 2] - a[:, 2]) / a[:, 5]
    d[:, 3:6] = np.log(b[:, 3:6] / a[:, 3:6])
    r = b[:, 6] - a[:, 6]
    d[:, 6] = r - np.pi * np.floor((r + np.pi / 2) / np.pi)
    return d, direction_bin(b[:, 6])


# --- IoU -------------------------------------------------------------------


def _as_corners(b) -> np.ndarray:
    if isinstance(b, Box2D):
        return np.array(b.as_list(), dtype=np.float64)
    return np.asarray(b, dtype=np.float64)


def iou_2d(a, b) -> float:
    a, b = _as_corners(a), _as_corners(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_2d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0) * np.maximum(ih, 0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def rect_corners(cx: float, cy: float, w: float, l: float, yaw: float) -> np.ndarray:
    """Counter-clockwise BEV corners of a rotated rectangle, shape (4, 2)."""
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    out.append(_cross_point(prev, cur, s_prev, s_cur))
                out.append(cur)
            elif s_prev >= 0:
                out.append(_cross_point(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _bev_params(b):
    if isinstance(b, Box3D):
        return b.cx, b.cy, b.w, b.l, b.yaw
    v = np.asarray(b, dtype=np.float64)
    return float(v[0]), float(v[1]), float(v[3]), float(v[4]), float(v[6])


def iou_bev(a, b) -> float:
    """Exact bird's-eye-view IoU of two rotated rectangles."""
    ax, ay, aw, al, ayaw = _bev_params(a)
    bx, by, bw, bl, byaw = _bev_params(b)
    area_a, area_b = aw * al, bw * bl
    reach = 0.5 * (math.hypot(aw, al) + math.hypot(bw, bl))
    if math.hypot(ax - bx, ay - by) >= reach:
        return 0.0
    inter_poly = clip_polygon(rect_corners(ax, ay, aw, al, ayaw), rect_corners(bx, by, bw, bl, byaw))
    inter = max(polygon_area(inter_poly), 0.0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(inter / union, 1.0))


def iou_for(box) -> Callable:
    if isinstance(box, (Box2D, Box3D)):
        return iou_bev if isinstance(box, Box3D) else iou_2d
    return iou_bev if len(box) == 7 else iou_2d


# --- score filtering and NMS -------------------------------------------------


@dataclass
class ScoreHits:
    anchors: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)

    def top(self, k: int | None) -> "ScoreHits":
        """Keep the ``k`` best hits (score desc, then original order)."""
        if k is None or len(self) <= k:
            return self
        order = np.lexsort((np.arange(len(self)), -self.scores))[:k]
        order.sort()
        return ScoreHits(self.anchors[order], self.classes[order], self.scores[order])


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def score_filter(logits, threshold: float) -> ScoreHits:
    """All (anchor, class) pairs whose sigmoid score exceeds ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    x = logits.numpy() if isinstance(logits, Tensor) else np.asarray(logits)
    if x.ndim != 2:
        raise ValueError("logits must have shape (A, K)")
    p = sigmoid(x)
    a, k = np.nonzero(p > threshold)
    return ScoreHits(a.astype(np.int64), k.astype(np.int64), p[a, k])


def nms_order(scores: np.ndarray) -> np.ndarray:
    """Processing order: score descending, original index ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def nms_indices(boxes: np.ndarray, scores, classes, iou_threshold: float, kind: str = "2d") -> np.ndarray:
    """Greedy class-wise NMS over array inputs; returns kept indices in processing order."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    if not np.all(np.isfinite(scores)):
        raise ValueError("NMS scores must be finite")
    order = nms_order(scores)
    n = len(order)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    if kind == "2d":
        x1, y1, x2, y2 = boxes.T
        area = (x2 - x1) * (y2 - y1)
    else:
        cx, cy = boxes[:, 0], boxes[:, 1]
        radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    for rank in range(n):
        i = order[rank]
        if suppressed[rank]:
            continue
        keep.append(i)
        rest = order[rank + 1 :]
        cand = rest[(classes[rest] == classes[i]) & ~suppressed[rank + 1 :]]
        if cand.size == 0:
            continue
        if kind == "2d":
            iw = np.minimum(x2[i], x2[cand]) - np.maximum(x1[i], x1[cand])
            ih = np.minimum(y2[i], y2[cand]) - np.maximum(y1[i], y1[cand])
            inter = np.maximum(iw, 0) * np.maximum(ih, 0)
            union = area[i] + area[cand] - inter
            with np.errstate(invalid="ignore", divide="ignore"):
                iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
            hit = cand[iou > iou_threshold]
        else:
            near = cand[np.hypot(cx[cand] - cx[i], cy[cand] - cy[i]) < radius[cand] + radius[i]]
            hit = np.array([j for j in near if iou_bev(boxes[i], boxes[j]) > iou_threshold], dtype=np.int64)
        suppressed[pos[hit]] = True
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float, iou_fn: Callable | None = None) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Detections are visited by descending score (ties by input position); a
    kept detection suppresses every later same-class detection whose IoU with
    it exceeds ``iou_threshold``.
    """
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    if iou_fn is None or iou_fn in (iou_2d, iou_bev):
        is3d = isinstance(dets[0].box, Box3D)
        if iou_fn is not None:
            is3d = iou_fn is iou_bev
        boxes = np.array([d.box.as_list() for d in dets])
        keep = nms_indices(boxes, scores, classes, iou_threshold, "bev" if is3d else "2d")
        return [dets[i] for i in keep]
    order = nms_order(scores)
    alive = [True] * len(dets)
    kept = []
    for r, i in enumerate(order):
        if not alive[r]:
            continue
        kept.append(dets[i])
        for r2 in range(r + 1, len(order)):
            j = order[r2]
            if alive[r2] and dets[j].class_id == dets[i].class_id and iou_fn(dets[i].box, dets[j].box) > iou_threshold:
                alive[r2] = False
    return kept


# --- JSON lines ------------------------------------------------------------


def detection_to_json(d: Detection, class_names: Sequence[str] | None = None) -> str:
    cls = class_names[d.class_id] if class_names else d.class_id
    box = [float(v) for v in d.box.as_list()]
    return json.dumps({"frame": d.frame, "class": cls, "score": float(d.score), "box": box})


def write_jsonl(dets: Iterable[Detection], path: str | Path, class_names: Sequence[str] | None = None) -> None:
    with open(path, "w") as fp:
        for d in dets:
            fp.write(detection_to_json(d, class_names) + "\n")


def _class_id(value, class_names: Sequence[str] | None) -> int:
    if isinstance(value, str):
        if class_names is None or value not in class_names:
            raise ValueError(f"unknown class name {value!r}")
        return list(class_names).index(value)
    return int(value)


def read_jsonl(path: str | Path, class_names: Sequence[str] | None = None) -> list[Detection]:
    """Parse detection / ground-truth lines. Records without a score get 1.0."""
    out = []
    with open(path) as fp:
        for lineno, line in enumerate(fp, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Detection(
                        box_from_list(rec["box"]),
                        float(rec.get("score", 1.0)),
                        _class_id(rec["class"], class_names),
                        str(rec.get("frame", "")),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
