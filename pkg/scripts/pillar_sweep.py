"""Toy PointPillars over (max pillars P, max points N) settings.

PFN MACs scale with P*N; the 2D CNN cost does not depend on either.

    python3 scripts/pillar_sweep.py --out results
"""

import argparse
import json
from pathlib import Path

from _common import fixture_dir, save_rows
from edgedet.cli import run_sweep, sweep_markdown


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fixtures", help="directory from make_fixtures.py (pointpillars/)")
    ap.add_argument("--frames", type=int, default=12)
    ap.add_argument("--skip-frames", type=int, default=9)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    root = fixture_dir("pointpillars", args.fixtures, args.frames, args.seed)
    values = [[16000, 32], [12000, 24], [12000, 16]]
    config = json.loads((root / "config.json").read_text())
    config.pop("pfn_graph", None)
    spec = {
        "axis": "pillars_and_points",
        "values": values,
        "pipeline": "pointpillars",
        "config": config,
        "input_dir": str(root / "frames"),
        "gt": str(root / "gt.jsonl"),
        "skip_frames": args.skip_frames,
    }
    rows = run_sweep(spec)
    for row in rows:
        row["pfn_mac_ratio"] = round(row["pfn_macs"] / rows[0]["pfn_macs"], 4)
        row["PN_ratio"] = round(row["P"] * row["N"] / (values[0][0] * values[0][1]), 4)
    save_rows(Path(args.out), "pillar_sweep", rows, sweep_markdown(rows))


if __name__ == "__main__":
    main()
