"""Synthetic scenes for the CLI, experiments and tests.

Images are noisy backgrounds with filled rectangles; point clouds are a
sparse ground plane plus points sampled inside upright boxes. Ground truth
is written in the same JSON-lines format as detections.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .pillars import PillarConfig, PointCloud, save_points_bin
from .postproc import AnchorConfig3D, Box2D, Box3D, Detection, write_jsonl
from .preproc import Image, write_ppm

IMAGE_CLASSES = ("car", "pedestrian", "cyclist", "truck", "bus")
LIDAR_CLASSES = ("Car", "Pedestrian", "Cyclist")


def image_scene(rng: np.random.Generator, size=(96, 160), num_classes=5, max_objects=4, frame=""):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    base = 60 + 40 * (xx / w)[..., None] + 20 * (yy / h)[..., None]
    img = base + rng.normal(0, 8, (h, w, 3))
    gts = []
    for _ in range(rng.integers(1, max_objects + 1)):
        c = int(rng.integers(num_classes))
        bw, bh = rng.uniform(0.1, 0.4) * w, rng.uniform(0.15, 0.5) * h
        x1, y1 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
        color = 255 * np.array([(c + 1) % 2, ((c + 1) // 2) % 2, ((c + 1) // 4) % 2]) * 0.8 + 20
        r0, r1, c0, c1 = int(y1), int(math.ceil(y1 + bh)), int(x1), int(math.ceil(x1 + bw))
        img[r0:r1, c0:c1] = color + rng.normal(0, 4, (r1 - r0, c1 - c0, 3))
        gts.append(Detection(Box2D(float(c0), float(r0), float(c1), float(r1)), 1.0, c, frame))
    return Image(np.clip(np.rint(img), 0, 255).astype(np.uint8)), gts


def lidar_scene(
    rng: np.random.Generator,
    pillars: PillarConfig = PillarConfig(),
    anchors: AnchorConfig3D = AnchorConfig3D(),
    max_objects=6,
    ground_points=6000,
    points_per_object=300,
    frame="",
):
    (x0, x1), (y0, y1) = pillars.x_range, pillars.y_range
    ground_z = anchors.z_centers[0] - anchors.sizes[0][2] / 2
    ground = np.column_stack(
        [
            rng.uniform(x0, x1, ground_points),
            rng.uniform(y0, y1, ground_points),
            ground_z + rng.normal(0, 0.03, ground_points),
            rng.uniform(0, 0.3, ground_points),
        ]
    )
    parts, gts = [ground], []
    for _ in range(rng.integers(1, max_objects + 1)):
        c = int(rng.integers(len(anchors.sizes)))
        w, l, h = (s * rng.uniform(0.9, 1.1) for s in anchors.sizes[c])
        margin = max(w, l)
        cx, cy = rng.uniform(x0 + margin, x1 - margin), rng.uniform(y0 + margin, y1 - margin)
        yaw = rng.uniform(-math.pi, math.pi)
        cz = ground_z + h / 2
        u = rng.uniform(-0.5, 0.5, (points_per_object, 3)) * [l, w, h]
        cs, sn = math.cos(yaw), math.sin(yaw)
        pts = np.column_stack(
            [
                cx + u[:, 0] * cs - u[:, 1] * sn,
                cy + u[:, 0] * sn + u[:, 1] * cs,
                cz + u[:, 2],
                rng.uniform(0.3, 1.0, points_per_object),
            ]
        )
        parts.append(pts)
        gts.append(Detection(Box3D(cx, cy, cz, w, l, h, yaw), 1.0, c, frame))
    pts = np.concatenate(parts)
    return PointCloud(pts[rng.permutation(len(pts))]), gts


def write_image_fixtures(out_dir: str | Path, frames=12, size=(96, 160), seed=0, resolution=(64, 128)) -> Path:
    """Frames ``frame_XXX.ppm``, ``gt.jsonl`` and a pipeline ``config.json``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    gts = []
    for i in range(frames):
        name = f"frame_{i:03d}"
        img, g = image_scene(rng, size, frame=name)
        write_ppm(img, out / "frames" / f"{name}.ppm")
        gts.extend(g)
    write_jsonl(gts, out / "gt.jsonl", IMAGE_CLASSES)
    cfg = {"pipeline": "retinanet", "resolution": list(resolution), "class_names": list(IMAGE_CLASSES)}
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


SMALL_PILLARS = {"x_range": [0.0, 40.96], "y_range": [-20.48, 20.48], "max_pillars": 12000, "max_points": 32}


def write_lidar_fixtures(out_dir: str | Path, frames=12, seed=0, pillars: dict | None = None) -> Path:
    """Frames ``frame_XXX.bin``, ``gt.jsonl`` and a pipeline ``config.json``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    pdoc = dict(SMALL_PILLARS if pillars is None else pillars)
    pcfg = PillarConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in pdoc.items()})
    rng = np.random.default_rng(seed)
    gts = []
    for i in range(frames):
        name = f"frame_{i:03d}"
        pc, g = lidar_scene(rng, pcfg, frame=name)
        save_points_bin(pc, out / "frames" / f"{name}.bin")
        gts.extend(g)
    write_jsonl(gts, out / "gt.jsonl", LIDAR_CLASSES)
    cfg = {"pipeline": "pointpillars", "pillars": pdoc, "class_names": list(LIDAR_CLASSES)}
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out
