"""Toy RetinaNet at the low / mid / high input resolutions.

Reports per-stage runtime and inference MACs, and compares the MAC ratio
with the pixel ratio.

    python3 scripts/resolution_sweep.py --out results
"""

import argparse
import json
from pathlib import Path

from _common import fixture_dir, save_rows
from edgedet.cli import run_sweep, sweep_markdown
from edgedet.preproc import RESOLUTIONS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixtures", help="directory from make_fixtures.py (retinanet/)")
    ap.add_argument("--frames", type=int, default=12)
    ap.add_argument("--skip-frames", type=int, default=9)
    ap.add_argument("--precision", default="f32", choices=("f32", "f16", "i8"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    root = fixture_dir("retinanet", args.fixtures, args.frames, args.seed)
    names = ["low", "mid", "high"]
    spec = {
        "axis": "resolution",
        "values": names,
        "pipeline": "retinanet",
        "config": json.loads((root / "config.json").read_text()),
        "input_dir": str(root / "frames"),
        "gt": str(root / "gt.jsonl"),
        "precision": args.precision,
        "skip_frames": args.skip_frames,
    }
    spec["config"].pop("graph", None)
    rows = run_sweep(spec)
    base_px = RESOLUTIONS["low"][0] * RESOLUTIONS["low"][1]
    for name, row in zip(names, rows):
        h, w = RESOLUTIONS[name]
        row["pixel_ratio"] = round(h * w / base_px, 4)
        row["mac_ratio"] = round(row["inference_macs"] / rows[0]["inference_macs"], 4)
    save_rows(Path(args.out), "resolution_sweep", rows, sweep_markdown(rows))


if __name__ == "__main__":
    main()
