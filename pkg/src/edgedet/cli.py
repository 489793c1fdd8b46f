"""``edgedet`` command line: calibrate, run, sweep, eval, graph-info."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

from .calibration import calibrate_graph, load_table, save_table
from .graph import describe, load_graph
from .metrics import KITTI_THRESHOLDS, evaluate, markdown_table, metrics_markdown
from .pipelines import DEFAULT_SKIP_FRAMES, KITTI_CLASSES, build_pipeline, run_pipeline
from .postproc import Detection, box_from_list, detection_to_json, write_jsonl
from .preproc import parse_resolution
from .tensor import DType, load_etf, save_etf

log = logging.getLogger("edgedet")

PATH_KEYS = ("graph", "pfn_graph", "calib", "input_dir", "gt", "config")
SWEEP_AXES = ("resolution", "pillars_and_points", "precision")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"ERROR: {message}", file=sys.stderr)
        raise SystemExit(2)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    return _resolve_paths(doc, path.parent)


def _resolve_paths(doc: dict, base: Path) -> dict:
    doc = dict(doc)
    for k in PATH_KEYS:
        if isinstance(doc.get(k), str):
            doc[k] = str(base / doc[k])
    return doc


def _pick(flag, doc: Mapping, key: str, default=None):
    """Flags win over config entries, which win over defaults."""
    if flag is not None:
        return flag
    return doc.get(key, default)


RUN_KEYS = ("precision", "calib", "method", "skip_frames", "power_label", "input_dir", "out", "dump_inputs")


def _split_config(doc: Mapping) -> tuple[dict, dict]:
    """Separate harness settings from the pipeline config proper."""
    doc = dict(doc)
    run = {k: doc.pop(k) for k in RUN_KEYS if k in doc}
    return doc, run


# --- calibrate -------------------------------------------------------------


def _etf_dataset(graph, path: Path):
    if len(graph.inputs) != 1:
        raise ValueError("ETF calibration datasets are supported for single-input graphs only")
    files = sorted(Path(path).glob("*.etf"))
    if not files:
        raise FileNotFoundError(f"no .etf tensors in calibration dataset {path}")
    (name,) = graph.inputs
    return [{name: load_etf(f)} for f in files]


def cmd_calibrate(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    pcfg, run = _split_config(cfg)
    method = _pick(args.method, run, "method", "entropy")
    out = _pick(args.out, run, "out")
    if out is None:
        raise ValueError("calibrate needs --out")
    if args.dataset:
        graph_path = args.graph or pcfg.get("graph")
        if graph_path is None:
            raise ValueError("calibrate needs --graph (or a config naming one)")
        graph = load_graph(graph_path)
        data = _etf_dataset(graph, Path(args.dataset))
    else:
        input_dir = _pick(args.input_dir, run, "input_dir")
        if not (args.config and input_dir):
            raise ValueError("calibrate needs --dataset DIR, or --config with --input-dir")
        pipe = build_pipeline(pcfg.get("pipeline", "retinanet"), pcfg, load_graph(args.graph) if args.graph else None)
        graph = pipe.main_graph
        data = [pipe.graph_inputs(p) for _, p in pipe.load_frames(input_dir)]
    table = calibrate_graph(graph, data, method=method, num_bins=args.num_bins, workers=args.workers)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_table(table, out)
    print(f"wrote {len(table)} calibration entries ({method}) to {out}")
    return 0


# --- run -------------------------------------------------------------------


def _pipeline_from_args(args, cfg: dict):
    kind = args.pipeline or cfg.get("pipeline")
    if kind is None:
        raise ValueError("pipeline type missing: pass --pipeline or set 'pipeline' in the config")
    doc = dict(cfg)
    if getattr(args, "pfn_precision", None):
        doc["pfn_precision"] = args.pfn_precision
    if getattr(args, "score_threshold", None) is not None:
        doc["score_threshold"] = args.score_threshold
    graph = load_graph(args.graph) if args.graph else None
    return build_pipeline(kind, doc, graph)


def _report_markdown(report) -> str:
    d = report.to_dict()
    label = f" [{d['power_mode_label']}]" if d["power_mode_label"] else ""
    rows = [(stage, "-" if ms is None else f"{ms:.3f}") for stage, ms in d["stages_ms"].items()]
    rows.append(("total", "-" if d["total_ms"] is None else f"{d['total_ms']:.3f}"))
    head = (
        f"{d['pipeline']} at {d['precision']}{label}: {d['frames_measured']} frames measured, "
        f"{d['frames_skipped']} skipped\n\n"
    )
    macs = markdown_table(("graph", "MACs"), sorted(d["macs"].items()))
    return head + markdown_table(("stage", "mean (ms)"), rows) + "\n" + macs


def cmd_run(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    pcfg, run = _split_config(cfg)
    pipe = _pipeline_from_args(args, pcfg)
    precision = _pick(args.precision, run, "precision", "f32")
    calib_path = _pick(args.calib, run, "calib")
    if DType.parse(precision) is DType.I8 and calib_path is None:
        raise ValueError("precision i8 requires --calib")
    calib = load_table(calib_path) if calib_path else None
    input_dir = _pick(args.input_dir, run, "input_dir")
    if input_dir is None:
        raise ValueError("run needs --input-dir")
    out = Path(_pick(args.out, run, "out", "run_out"))
    skip = int(_pick(args.skip_frames, run, "skip_frames", DEFAULT_SKIP_FRAMES))
    label = _pick(args.power_label, run, "power_label", "")
    frames = pipe.load_frames(input_dir)

    dump = _pick(args.dump_inputs, run, "dump_inputs")
    if dump:
        Path(dump).mkdir(parents=True, exist_ok=True)
        for frame, path in frames:
            (tensor,) = pipe.graph_inputs(path).values()
            save_etf(tensor, Path(dump) / f"{frame}.etf")

    dets, report = run_pipeline(pipe, frames, precision, calib, skip, label)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(dets, out / "detections.jsonl", pipe.cfg.class_names)
    (out / "report.json").write_text(_dump(report.to_dict()))
    (out / "report.md").write_text(_report_markdown(report))
    print(f"{len(dets)} detections over {len(frames)} frames written to {out}")
    return 0


# --- eval ------------------------------------------------------------------


def _read_records(path: str | Path) -> list[dict]:
    recs = []
    with open(path) as fp:
        for lineno, line in enumerate(fp, 1):
            if line.strip():
                try:
                    recs.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
    return recs


def _vocabulary(records: Sequence[dict], preferred: Sequence[str]) -> list[str]:
    vocab = list(preferred)
    for r in records:
        label = str(r["class"])
        if label not in vocab:
            vocab.append(label)
    return vocab


def load_labeled(gt_recs: Sequence[dict], det_recs: Sequence[dict], class_names: Sequence[str] = ()):
    """Map gt and detection records through one class vocabulary."""
    vocab = _vocabulary(list(gt_recs) + list(det_recs), class_names)

    def conv(recs, what):
        out = []
        for i, r in enumerate(recs, 1):
            try:
                box = box_from_list(r["box"])
                out.append(Detection(box, float(r.get("score", 1.0)), vocab.index(str(r["class"])), str(r.get("frame", ""))))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{what} record {i}: {exc}") from None
        return out

    return conv(gt_recs, "ground-truth"), conv(det_recs, "detection"), vocab


def _parse_thresholds(text: str | None, task: str) -> dict[str, float] | float:
    if text is None:
        return dict(KITTI_THRESHOLDS) if task == "3d" else 0.5
    if "=" not in text:
        return float(text)
    out = {}
    for part in text.split(","):
        name, _, v = part.partition("=")
        out[name.strip()] = float(v)
    return out


def _class_thresholds(thr, vocab: Sequence[str]):
    if isinstance(thr, float):
        return thr
    return {i: thr[n] for i, n in enumerate(vocab) if n in thr}


def evaluate_records(gt_recs, det_recs, task="2d", thresholds=None, class_names=(), recall_points=None):
    if task not in ("2d", "3d"):
        raise ValueError("task must be 2d or 3d")
    preferred = list(class_names) or (list(KITTI_CLASSES) if task == "3d" else [])
    gts, dets, vocab = load_labeled(gt_recs, det_recs, preferred)
    want = 4 if task == "2d" else 7
    for d in gts + dets:
        if len(d.box.as_list()) != want:
            raise ValueError(f"task {task} expects {want}-value boxes")
    if thresholds is None or isinstance(thresholds, str):
        thresholds = _parse_thresholds(thresholds, task)
    res = evaluate(dets, gts, _class_thresholds(thresholds, vocab), recall_points)
    return res, vocab


def evaluate_files(gt_path, det_path, task="2d", thresholds=None, class_names=(), recall_points=None):
    return evaluate_records(_read_records(gt_path), _read_records(det_path), task, thresholds, class_names, recall_points)


def cmd_eval(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    names = cfg.get("class_names", ())
    res, vocab = evaluate_files(args.gt, args.detections, args.task, args.iou, names, args.recall_points)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    md = metrics_markdown(res, vocab)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(md)
        out.with_suffix(".json").write_text(_dump(res.to_dict(vocab)))
    print(md, end="")
    return 0


# --- sweep -----------------------------------------------------------------


def _sweep_value_doc(axis: str, value, base: dict) -> tuple[dict, str | None, dict]:
    """(pipeline config, precision override, row label columns) for one sweep value."""
    doc = copy.deepcopy(base)
    if axis == "resolution":
        if "graph" in doc:
            raise ValueError("a resolution sweep rebuilds the graph; drop 'graph' from the config")
        res = parse_resolution(value)
        doc["resolution"] = list(res)
        return doc, None, {"resolution": f"{res[0]}x{res[1]}"}
    if axis == "pillars_and_points":
        if "pfn_graph" in doc:
            raise ValueError("a pillars_and_points sweep rebuilds the PFN; drop 'pfn_graph' from the config")
        p, n = (int(v) for v in value)
        doc.setdefault("pillars", {})
        doc["pillars"] = dict(doc["pillars"], max_pillars=p, max_points=n)
        return doc, None, {"P": p, "N": n}
    if axis == "precision":
        return doc, DType.parse(value).name.lower(), {}
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def run_sweep(spec: Mapping[str, Any]) -> list[dict]:
    axis = spec.get("axis")
    values = spec.get("values") or []
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep values must be non-empty")
    base = spec.get("config", {})
    if isinstance(base, str):
        base = _load_json(base)
    base, run = _split_config(base)
    kind = spec.get("pipeline") or base.get("pipeline")
    if kind is None:
        raise ValueError("sweep spec needs 'pipeline'")
    input_dir = spec.get("input_dir") or run.get("input_dir")
    if input_dir is None:
        raise ValueError("sweep spec needs 'input_dir'")
    gt = spec.get("gt")
    method = spec.get("method", "entropy")
    skip = int(spec.get("skip_frames", run.get("skip_frames", DEFAULT_SKIP_FRAMES)))
    label = spec.get("power_label", run.get("power_label", ""))
    task = "2d" if kind == "retinanet" else "3d"

    rows = []
    for value in values:
        doc, prec_override, cols = _sweep_value_doc(axis, value, base)
        precision = prec_override or spec.get("precision", run.get("precision", "f32"))
        pipe = build_pipeline(kind, doc)
        frames = pipe.load_frames(input_dir)
        calib, calib_src = None, ""
        if DType.parse(precision) is DType.I8:
            if spec.get("calib") and axis == "precision":
                calib, calib_src = load_table(spec["calib"]), "table"
            else:
                data = [pipe.graph_inputs(p) for _, p in frames]
                calib, calib_src = calibrate_graph(pipe.main_graph, data, method=method), f"auto-{method}"
        dets, report = run_pipeline(pipe, frames, precision, calib, skip, label)
        row = dict(cols)
        row.update(precision=DType.parse(precision).name.lower(), calibration=calib_src, detections=len(dets))
        row.update({f"{k}_macs": v for k, v in report.macs.items()})
        row.update({f"{k}_ms": v for k, v in report.stages_ms.items()})
        row["total_ms"] = report.total_ms
        if gt:
            names = list(pipe.cfg.class_names or [])
            det_recs = [json.loads(detection_to_json(d, pipe.cfg.class_names)) for d in dets]
            res, vocab = evaluate_records(_read_records(gt), det_recs, task, spec.get("iou"), names)
            for c, ap in sorted(res.ap.items()):
                row[f"AP {vocab[c]}"] = ap
            row["mAP"], row["weighted_mAP"] = res.mAP, res.weighted_mAP
        rows.append(row)
    return rows


def sweep_markdown(rows: Sequence[dict]) -> str:
    columns: list[str] = []
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)

    def head(k: str) -> str:
        if k.endswith("_ms"):
            return f"{k[:-3]} (ms)"
        if k.endswith("_macs"):
            return f"{k[:-5]} MACs"
        return k.replace("_", " ")

    def cell(k, v):
        if v is None:
            return "-"
        if k.endswith("_ms"):
            return f"{v:.3f}"
        return v

    return markdown_table([head(k) for k in columns], [[cell(k, r.get(k)) for k in columns] for r in rows])


def cmd_sweep(args) -> int:
    spec = _load_json(args.spec)
    if args.gt:
        spec["gt"] = args.gt
    for key in ("precision", "method", "skip_frames", "power_label", "calib", "input_dir"):
        v = getattr(args, key, None)
        if v is not None:
            spec[key] = v
    out = Path(args.out or spec.get("out", "sweep_out"))
    rows = run_sweep(spec)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(_dump({"axis": spec["axis"], "rows": rows}))
    md = sweep_markdown(rows)
    (out / "sweep.md").write_text(md)
    print(md, end="")
    return 0


# --- graph-info --------------------------------------------------------------


def cmd_graph_info(args) -> int:
    if not args.graph:
        raise ValueError("graph-info needs --graph")
    info = describe(load_graph(args.graph))
    rows = [(n["name"], n["kind"], "x".join(map(str, n["shape"])), n["macs"]) for n in info["nodes"]]
    print(f"graph {info['name']}: valid, {len(rows)} nodes, {info['total_macs']} MACs, int8 {'allowed' if info['allow_int8'] else 'refused'}")
    print(markdown_table(("node", "kind", "shape", "MACs"), rows), end="")
    if args.out:
        Path(args.out).write_text(_dump(info))
    return 0


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgedet", description="Embedded detection pipeline benchmark harness")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *names):
        if "graph" in names:
            sp.add_argument("--graph", help="JSON graph file")
        if "config" in names:
            sp.add_argument("--config", help="JSON config file")
        if "precision" in names:
            sp.add_argument("--precision", choices=("f32", "f16", "i8"))
        if "calib" in names:
            sp.add_argument("--calib", help="JSON calibration table")
        if "method" in names:
            sp.add_argument("--method", choices=("minmax", "entropy"))
        if "skip" in names:
            sp.add_argument("--skip-frames", type=int, dest="skip_frames")
            sp.add_argument("--power-label", dest="power_label")
        sp.add_argument("--out", help="output path")

    c = sub.add_parser("calibrate", help="build an Int8 calibration table")
    common(c, "graph", "config", "method")
    c.add_argument("--dataset", help="directory of .etf input tensors")
    c.add_argument("--input-dir", dest="input_dir", help="raw frames (with --config)")
    c.add_argument("--num-bins", type=int, default=2048, dest="num_bins")
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("run", help="run a pipeline over a directory of frames")
    common(r, "graph", "config", "precision", "calib", "method", "skip")
    r.add_argument("--pipeline", choices=("retinanet", "pointpillars"))
    r.add_argument("--input-dir", dest="input_dir")
    r.add_argument("--pfn-precision", dest="pfn_precision", choices=("f32", "f16", "i8"))
    r.add_argument("--score-threshold", type=float, dest="score_threshold")
    r.add_argument("--dump-inputs", dest="dump_inputs", help="also save each frame's graph input as ETF")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a resolution / pillar / precision sweep")
    common(s, "config", "precision", "calib", "method", "skip")
    s.add_argument("--spec", required=True, help="JSON sweep spec")
    s.add_argument("--gt", help="ground-truth JSONL")
    s.add_argument("--input-dir", dest="input_dir")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="evaluate detections against ground truth")
    common(e, "config")
    e.add_argument("--detections", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--task", choices=("2d", "3d"), default="2d")
    e.add_argument("--iou", help="IoU threshold, or per-class list like Car=0.7,Pedestrian=0.5")
    e.add_argument("--recall-points", type=int, dest="recall_points", help="e.g. 40 for KITTI-style AP")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("graph-info", help="validate a graph and list shapes and MACs")
    common(g, "graph")
    g.set_defaults(func=cmd_graph_info)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line error contract
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"ERROR: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
