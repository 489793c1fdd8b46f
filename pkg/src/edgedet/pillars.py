"""Pillar encoding, pillar-to-BEV scatter and the PointPillars front end."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph, execute
from .tensor import DType, Tensor

NUM_FEATURES = 9
# seed-sequence tag for the pillar-selection stream (grid indices stay below it)
_PILLAR_STREAM = 2**32

PFN_INT8_REJECTION = (
    "Int8 is not supported for the pillar feature network: its inputs are metric "
    "coordinates spanning about +-1e2 m at 1e-2 m resolution, which 8-bit integers cannot hold"
)


@dataclass(frozen=True)
class PointCloud:
    """(M, 4) float32 points: x, y, z in meters and intensity in [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PillarConfig:
    x_range: tuple[float, float] = (0.0, 69.12)
    y_range: tuple[float, float] = (-39.68, 39.68)
    z_range: tuple[float, float] = (-3.0, 1.0)
    pillar_size: tuple[float, float] = (0.16, 0.16)
    max_pillars: int = 16000
    max_points: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ValueError("pillar ranges must be non-degenerate")
        if min(self.pillar_size) <= 0:
            raise ValueError("pillar size must be positive")
        if self.max_pillars < 1 or self.max_points < 1:
            raise ValueError("max_pillars and max_points must be >= 1")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be non-negative")

    @property
    def num_features(self) -> int:
        return NUM_FEATURES

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(H, W): rows along y, columns along x."""
        h = math.ceil(round((self.y_range[1] - self.y_range[0]) / self.pillar_size[1], 9))
        w = math.ceil(round((self.x_range[1] - self.x_range[0]) / self.pillar_size[0], 9))
        return h, w


@dataclass(frozen=True, eq=False)
class PillarBatch:
    features: np.ndarray  # (P, N, 9) float32
    coords: np.ndarray  # (P, 2) int64 (row, col)
    num_points: np.ndarray  # (P,) int64
    num_pillars: int
    point_ids: np.ndarray  # (P, N) source point index, -1 for padding
    grid_shape: tuple[int, int]
    dropped_range: int = 0
    dropped_sampling: int = 0

    def tensor(self) -> Tensor:
        return Tensor(self.features)


def _grid_indices(pts: np.ndarray, cfg: PillarConfig):
    x, y, z = (pts[:, i].astype(np.float64) for i in range(3))
    (x0, x1), (y0, y1), (z0, z1) = cfg.x_range, cfg.y_range, cfg.z_range
    inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z < z1)
    h, w = cfg.grid_shape
    col = np.clip(np.floor((x - x0) / cfg.pillar_size[0]).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor((y - y0) / cfg.pillar_size[1]).astype(np.int64), 0, h - 1)
    return inside, row, col


def _smallest_keys(keys: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` smallest keys, returned in ascending position order."""
    return np.sort(np.argsort(keys, kind="stable")[:k])


def pillarize(pc: PointCloud, cfg: PillarConfig) -> PillarBatch:
    """Group points into pillars and build the (P, N, 9) augmented features.

    Points are put in a canonical order (grid cell, then x, y, z, intensity)
    before any sampling, so the batch does not depend on input point order.
    Pillars with more than N points keep the N points with the smallest
    random keys drawn from a stream seeded by ``(rng_seed, grid index)``;
    with more than P pillars the same rule chooses the pillars. Per point the
    9 features are x, y, z, intensity, the offsets from the mean of the
    pillar's kept points, and the x/y offsets from the pillar center.
    """
    P, N = cfg.max_pillars, cfg.max_points
    h, w = cfg.grid_shape
    pts = pc.points
    inside, row, col = _grid_indices(pts, cfg)
    src = np.flatnonzero(inside)
    lin = row[src] * w + col[src]
    p = pts[src]
    order = np.lexsort((p[:, 3], p[:, 2], p[:, 1], p[:, 0], lin))
    src, lin = src[order], lin[order]

    features = np.zeros((P, N, NUM_FEATURES), dtype=np.float32)
    coords = np.zeros((P, 2), dtype=np.int64)
    num_points = np.zeros(P, dtype=np.int64)
    point_ids = np.full((P, N), -1, dtype=np.int64)
    dropped_range = int(len(pts) - len(src))
    if src.size == 0:
        return PillarBatch(features, coords, num_points, 0, point_ids, (h, w), dropped_range, 0)

    cells, starts, counts = np.unique(lin, return_index=True, return_counts=True)
    if len(cells) > P:
        keys = np.random.default_rng([cfg.rng_seed, _PILLAR_STREAM]).random(len(cells))
        chosen = _smallest_keys(keys, P)
    else:
        chosen = np.arange(len(cells))

    kept_src: list[np.ndarray] = []
    for slot, c in enumerate(chosen):
        members = src[starts[c] : starts[c] + counts[c]]
        if counts[c] > N:
            keys = np.random.default_rng([cfg.rng_seed, int(cells[c])]).random(counts[c])
            members = members[_smallest_keys(keys, N)]
        kept_src.append(members)

    n_kept = np.array([len(m) for m in kept_src], dtype=np.int64)
    slots = np.repeat(np.arange(len(chosen)), n_kept)
    pos = np.concatenate([np.arange(k) for k in n_kept])
    ids = np.concatenate(kept_src)
    xyz = pts[ids, :3].astype(np.float64)
    sums = np.stack([np.bincount(slots, weights=xyz[:, d], minlength=len(chosen)) for d in range(3)], axis=1)
    means = sums / n_kept[:, None]

    cell = cells[chosen]
    prow, pcol = cell // w, cell % w
    centers = np.stack(
        [cfg.x_range[0] + (pcol + 0.5) * cfg.pillar_size[0], cfg.y_range[0] + (prow + 0.5) * cfg.pillar_size[1]],
        axis=1,
    )
    feat = np.empty((len(ids), NUM_FEATURES), dtype=np.float64)
    feat[:, :4] = pts[ids]
    feat[:, 4:7] = xyz - means[slots]
    feat[:, 7:9] = xyz[:, :2] - centers[slots]

    m = len(chosen)
    features[slots, pos] = feat.astype(np.float32)
    point_ids[slots, pos] = ids
    coords[:m, 0], coords[:m, 1] = prow, pcol
    num_points[:m] = n_kept
    dropped_sampling = int(len(src) - n_kept.sum())
    return PillarBatch(features, coords, num_points, m, point_ids, (h, w), dropped_range, dropped_sampling)


def scatter(pillar_features, coords: np.ndarray, num_pillars: int, grid: tuple[int, int]) -> Tensor:
    """Place the first ``num_pillars`` feature rows on a zero (C, H, W) canvas."""
    feats = pillar_features.numpy() if isinstance(pillar_features, Tensor) else np.asarray(pillar_features)
    h, w = grid
    c = feats.shape[1]
    coords = np.asarray(coords, dtype=np.int64)[:num_pillars]
    rows, cols = coords[:, 0], coords[:, 1]
    if np.any((rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)):
        raise ValueError("pillar coordinates fall outside the BEV grid")
    lin = rows * w + cols
    if len(np.unique(lin)) != len(lin):
        raise ValueError("duplicate pillar coordinates")
    canvas = np.zeros((c, h * w), dtype=np.float32)
    canvas[:, lin] = feats[:num_pillars].T
    return Tensor(canvas.reshape(c, h, w))


def gather(bev, coords: np.ndarray, num_pillars: int) -> np.ndarray:
    """Inverse of ``scatter``: read the (num_pillars, C) features back."""
    x = bev.numpy() if isinstance(bev, Tensor) else np.asarray(bev)
    coords = np.asarray(coords, dtype=np.int64)[:num_pillars]
    return x[:, coords[:, 0], coords[:, 1]].T


def pfn_forward(batch: PillarBatch, pfn_graph: Graph, precision="f32", calib=None) -> Tensor:
    if DType.parse(precision) is DType.I8:
        raise ValueError(PFN_INT8_REJECTION)
    (in_name,) = pfn_graph.inputs
    (out_name,) = pfn_graph.outputs
    return execute(pfn_graph, {in_name: batch.tensor()}, precision, calib)[out_name]


def run_pillar_frontend(pc: PointCloud, cfg: PillarConfig, pfn_graph: Graph, precision="f32", calib=None) -> Tensor:
    """pillarize -> PFN graph -> scatter, returning the (C, H, W) pseudo-image."""
    if DType.parse(precision) is DType.I8:
        raise ValueError(PFN_INT8_REJECTION)
    (in_name,) = pfn_graph.inputs
    expected = (cfg.max_pillars, cfg.max_points, NUM_FEATURES)
    if pfn_graph.inputs[in_name] != expected:
        raise ValueError(f"PFN graph expects {pfn_graph.inputs[in_name]}, pillar config yields {expected}")
    batch = pillarize(pc, cfg)
    encoded = pfn_forward(batch, pfn_graph, precision, calib)
    return scatter(encoded, batch.coords, batch.num_pillars, batch.grid_shape)


# --- point-cloud files -----------------------------------------------------


def load_points_bin(path: str | Path) -> PointCloud:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 16 bytes")
    return PointCloud(raw.reshape(-1, 4))


def save_points_bin(pc: PointCloud, path: str | Path) -> None:
    np.ascontiguousarray(pc.points, dtype="<f4").tofile(path)


def load_points_jsonl(path: str | Path) -> PointCloud:
    rows = []
    with open(path) as fp:
        for line in fp:
            if line.strip():
                rows.append(json.loads(line))
    return PointCloud(np.array(rows, dtype=np.float32).reshape(-1, 4))


def save_points_jsonl(pc: PointCloud, path: str | Path) -> None:
    with open(path, "w") as fp:
        for p in pc.points:
            fp.write(json.dumps([float(v) for v in p]) + "\n")


def load_points(path: str | Path) -> PointCloud:
    path = Path(path)
    if path.suffix in (".jsonl", ".json"):
        return load_points_jsonl(path)
    return load_points_bin(path)
