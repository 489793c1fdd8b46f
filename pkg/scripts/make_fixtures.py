"""Write synthetic image / point-cloud fixtures, toy graphs and sweep specs.

    python3 scripts/make_fixtures.py --out fixtures
"""

import argparse
import json
from pathlib import Path

from edgedet.builders import RetinaNetToyConfig, build_retinanet_toy
from edgedet.fixtures import write_image_fixtures, write_lidar_fixtures
from edgedet.graph import save_graph
from edgedet.pipelines import PointPillarsPipelineConfig, PointPillarsPipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--frames", type=int, default=12)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)

    img = write_image_fixtures(out / "retinanet", frames=args.frames, seed=args.seed)
    cfg = json.loads((img / "config.json").read_text())
    save_graph(build_retinanet_toy(RetinaNetToyConfig(tuple(cfg["resolution"]))), img / "retinanet_toy.json")

    lidar = write_lidar_fixtures(out / "pointpillars", frames=args.frames, seed=args.seed)
    cfg = json.loads((lidar / "config.json").read_text())
    pipe = PointPillarsPipeline(PointPillarsPipelineConfig.from_dict(cfg))
    save_graph(pipe.pfn_graph, lidar / "pfn_toy.json")
    save_graph(pipe.graph, lidar / "cnn2d_toy.json")

    specs = {
        "retinanet/sweep_resolution.json": {
            "axis": "resolution",
            "values": ["low", "mid", "high"],
            "pipeline": "retinanet",
            "config": "config.json",
            "input_dir": "frames",
            "gt": "gt.jsonl",
        },
        "retinanet/sweep_precision.json": {
            "axis": "precision",
            "values": ["f32", "f16", "i8"],
            "pipeline": "retinanet",
            "config": "config.json",
            "input_dir": "frames",
            "gt": "gt.jsonl",
            "method": "entropy",
        },
        "pointpillars/sweep_pillars.json": {
            "axis": "pillars_and_points",
            "values": [[16000, 32], [12000, 24], [12000, 16]],
            "pipeline": "pointpillars",
            "config": "config.json",
            "input_dir": "frames",
            "gt": "gt.jsonl",
        },
        "pointpillars/sweep_precision.json": {
            "axis": "precision",
            "values": ["f32", "f16", "i8"],
            "pipeline": "pointpillars",
            "config": "config.json",
            "input_dir": "frames",
            "gt": "gt.jsonl",
        },
    }
    for rel, spec in specs.items():
        (out / rel).write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
