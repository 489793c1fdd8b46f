"""F32 vs F16 vs Int8 (minmax and entropy calibration) on both toy pipelines.

For each setting: detection count, runtime, and agreement with the F32
detections (share of F32 boxes with a same-class partner within the box
tolerance, and the worst such distance). Untrained toy weights make the
absolute mAP meaningless; agreement is the quantity of interest.

    python3 scripts/precision_comparison.py --out results
"""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from _common import fixture_dir, save_rows
from edgedet.calibration import calibrate_graph
from edgedet.metrics import markdown_table
from edgedet.pipelines import build_pipeline, run_pipeline
from edgedet.postproc import Box3D
from edgedet.preproc import read_ppm


def box_distance(a, b, scale):
    d = np.abs(np.subtract(a.box.as_list(), b.box.as_list()))
    if isinstance(a.box, Box3D):
        d[6] = min(d[6], 2 * math.pi - d[6])
    return float(np.max(d / scale))


def agreement(ref, other, scale, tol):
    """(fraction of ``ref`` paired within ``tol``, worst paired distance)."""
    if not ref:
        return 1.0, 0.0
    paired, worst = 0, 0.0
    for d in ref:
        dists = [box_distance(d, e, scale) for e in other if (e.frame, e.class_id) == (d.frame, d.class_id)]
        if dists and min(dists) <= tol:
            paired += 1
            worst = max(worst, min(dists))
    return paired / len(ref), worst


def compare(kind, root, skip, tol):
    config = json.loads((root / "config.json").read_text())
    pipe = build_pipeline(kind, config)
    frames = pipe.load_frames(root / "frames")
    if kind == "retinanet":
        # 2D boxes in units of the source image size
        img = read_ppm(frames[0][1])
        h, w = img.height, img.width
        scale = np.array([w, h, w, h], dtype=np.float64)
    else:
        scale = np.ones(7)
    data = [pipe.graph_inputs(p) for _, p in frames]
    settings = [("f32", None, ""), ("f16", None, "")]
    settings += [("i8", calibrate_graph(pipe.main_graph, data, method=m), m) for m in ("minmax", "entropy")]
    rows, ref = [], None
    for precision, calib, method in settings:
        dets, report = run_pipeline(pipe, frames, precision, calib, skip)
        if ref is None:
            ref = dets
        frac, worst = agreement(ref, dets, scale, tol)
        rows.append(
            {
                "pipeline": kind,
                "precision": precision,
                "calibration": method or "-",
                "detections": len(dets),
                "agree_with_f32": round(frac, 4),
                "worst_paired_error": round(worst, 6),
                "total_ms": report.total_ms,
            }
        )
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixtures", help="directory from make_fixtures.py")
    ap.add_argument("--frames", type=int, default=6)
    ap.add_argument("--skip-frames", type=int, default=1)
    ap.add_argument("--tolerance", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    rows = []
    for kind in ("retinanet", "pointpillars"):
        given = str(Path(args.fixtures) / kind) if args.fixtures else None
        rows += compare(kind, fixture_dir(kind, given, args.frames, args.seed), args.skip_frames, args.tolerance)
    cols = list(rows[0])
    table = markdown_table(cols, [[("-" if r[c] is None else r[c]) for c in cols] for r in rows])
    save_rows(Path(args.out), "precision_comparison", rows, table)


if __name__ == "__main__":
    main()
