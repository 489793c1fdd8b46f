"""End-to-end RetinaNet and PointPillars pipelines with per-stage timing."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .builders import (
    PFNToyConfig,
    PointPillarsToyConfig,
    RetinaNetToyConfig,
    build_pfn_toy,
    build_pointpillars_2dcnn_toy,
    build_retinanet_toy,
)
from .graph import Graph, execute, flop_count, load_graph
from .pillars import (
    PFN_INT8_REJECTION,
    PillarConfig,
    PointCloud,
    load_points,
    pfn_forward,
    pillarize,
    scatter,
)
from .postproc import (
    AnchorConfig2D,
    AnchorConfig3D,
    Box2D,
    Box3D,
    Detection,
    decode_2d,
    decode_3d,
    nms,
    score_filter,
)
from .preproc import PreprocConfig, parse_resolution, preprocess, read_ppm
from .tensor import DType, Tensor

log = logging.getLogger(__name__)

DEFAULT_SKIP_FRAMES = 9
DEFAULT_SCORE_THRESHOLD = 0.05
KITTI_CLASSES = ("Car", "Pedestrian", "Cyclist")


def _tuples(v):
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    return v


def _dataclass_from(cls, doc: Mapping | None, **overrides):
    doc = dict(doc or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    doc.update(overrides)
    return cls(**{k: _tuples(v) for k, v in doc.items()})


def _flatten_head(x: np.ndarray, per_cell: int, width: int) -> np.ndarray:
    """(A*width, H, W) head output -> (H*W*A, width), matching anchor order."""
    c, h, w = x.shape
    if c != per_cell * width:
        raise ValueError(f"head has {c} channels, expected {per_cell}x{width}")
    return x.reshape(per_cell, width, h, w).transpose(2, 3, 0, 1).reshape(-1, width)


# --- runtime report --------------------------------------------------------


@dataclass
class RuntimeReport:
    """Mean per-stage wall-clock ms over measured frames; total is their sum."""

    pipeline: str
    precision: str
    stages_ms: dict[str, float | None]
    frames_measured: int
    frames_skipped: int
    power_mode_label: str = ""
    macs: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.frames_skipped < 0:
            raise ValueError("frames_skipped must be >= 0")

    @property
    def total_ms(self) -> float | None:
        if any(v is None for v in self.stages_ms.values()):
            return None
        return math.fsum(self.stages_ms.values())

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "precision": self.precision,
            "power_mode_label": self.power_mode_label,
            "frames_measured": self.frames_measured,
            "frames_skipped": self.frames_skipped,
            "macs": dict(self.macs),
            "stages_ms": dict(self.stages_ms),
            "total_ms": self.total_ms,
        }

    @classmethod
    def from_timings(cls, pipeline, precision, stages, timings: Sequence[Mapping[str, float]], skip, label, macs):
        measured = timings[skip:]
        skipped = len(timings) - len(measured)
        if not measured:
            log.warning("all %d frames fall inside the warm-up skip of %d", len(timings), skip)
            means = {s: None for s in stages}
        else:
            means = {s: 1e3 * math.fsum(t[s] for t in measured) / len(measured) for s in stages}
        return cls(pipeline, precision, means, len(measured), skipped, label, dict(macs))


class _Timer:
    def __init__(self):
        self.times: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t0


def _check_precision(precision, calib, graph: Graph) -> DType:
    dt = DType.parse(precision)
    if dt is DType.I8:
        if calib is None:
            raise ValueError("Int8 precision requires a calibration table (--calib)")
        if not graph.allow_int8:
            raise ValueError(f"graph {graph.name!r} does not allow Int8")
    elif calib is not None:
        log.info("calibration table ignored at %s precision", dt.name)
    return dt


# --- RetinaNet -------------------------------------------------------------


@dataclass(frozen=True)
class RetinaNetPipelineConfig:
    model: RetinaNetToyConfig = field(default_factory=RetinaNetToyConfig)
    preproc: PreprocConfig | None = None  # resolution follows the model when omitted
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_threshold: float = 0.5
    top_k: int = 1000
    max_detections: int = 100
    class_names: tuple[str, ...] | None = None
    graph: str | None = None

    def __post_init__(self):
        if self.preproc is None:
            object.__setattr__(self, "preproc", PreprocConfig(self.model.resolution))
        if tuple(self.preproc.resolution) != tuple(self.model.resolution):
            raise ValueError("pre-processing resolution must equal the model input resolution")
        if not 0 <= self.score_threshold <= 1 or not 0 <= self.nms_threshold <= 1:
            raise ValueError("thresholds must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RetinaNetPipelineConfig":
        doc = dict(doc)
        doc.pop("pipeline", None)
        res = doc.pop("resolution", None)
        model = dict(doc.pop("model", {}) or {})
        if "anchors" in model:
            model["anchors"] = _dataclass_from(AnchorConfig2D, model["anchors"])
        if res is not None:
            model["resolution"] = parse_resolution(res)
        model = _dataclass_from(RetinaNetToyConfig, model)
        pre = doc.pop("preproc", None)
        pre = _dataclass_from(PreprocConfig, pre, resolution=model.resolution) if pre is not None else None
        return _dataclass_from(cls, doc, model=model, preproc=pre)


class RetinaNetPipeline:
    name = "retinanet"
    stages = ("preprocess", "inference", "postprocess")

    def __init__(self, cfg: RetinaNetPipelineConfig = RetinaNetPipelineConfig(), graph: Graph | None = None):
        self.cfg = cfg
        if graph is None:
            graph = load_graph(cfg.graph) if cfg.graph else build_retinanet_toy(cfg.model)
        h, w = cfg.model.resolution
        (self.input_name,) = graph.inputs
        if tuple(graph.inputs[self.input_name]) != (3, h, w):
            raise ValueError(f"graph input {graph.inputs[self.input_name]} does not match resolution {h}x{w}")
        self.graph = graph
        self.anchors = graph.constants["anchors"].numpy()
        self.levels = [o[4:] for o in graph.outputs if o.startswith("cls_")]

    @property
    def main_graph(self) -> Graph:
        return self.graph

    def macs(self) -> dict[str, int]:
        return {"inference": flop_count(self.graph)}

    def load_frames(self, input_dir: str | Path) -> list[tuple[str, Path]]:
        files = sorted(Path(input_dir).glob("*.ppm"))
        if not files:
            raise FileNotFoundError(f"no .ppm frames in {input_dir}")
        return [(f.stem, f) for f in files]

    def graph_inputs(self, path: Path) -> dict[str, Tensor]:
        return {self.input_name: preprocess(read_ppm(path), self.cfg.preproc)}

    def run_frame(self, frame: str, path: Path, precision="f32", calib=None, timer=None):
        dt = _check_precision(precision, calib, self.graph)
        timer = timer or _Timer()
        with timer.stage("preprocess"):
            img = read_ppm(path)
            x = preprocess(img, self.cfg.preproc)
        with timer.stage("inference"):
            out = execute(self.graph, {self.input_name: x}, dt, calib)
        with timer.stage("postprocess"):
            dets = self.postprocess(out, frame, (img.height, img.width))
        return dets, timer.times

    def postprocess(self, out: Mapping[str, Tensor], frame: str, orig_size: tuple[int, int]) -> list[Detection]:
        cfg = self.cfg
        a, k = cfg.model.anchors.per_cell, cfg.model.num_classes
        logits = np.concatenate([_flatten_head(out[f"cls_{lv}"].numpy(), a, k) for lv in self.levels])
        deltas = np.concatenate([_flatten_head(out[f"box_{lv}"].numpy(), a, 4) for lv in self.levels])
        hits = score_filter(logits, cfg.score_threshold).top(cfg.top_k)
        dec = decode_2d(self.anchors[hits.anchors], deltas[hits.anchors], cfg.model.resolution)
        rh, rw = cfg.model.resolution
        oh, ow = orig_size
        scale = np.array([ow / rw, oh / rh, ow / rw, oh / rh])
        dets = [
            Detection(Box2D(*(float(v) for v in box * scale)), float(hits.scores[r]), int(hits.classes[r]), frame)
            for box, r in zip(dec.boxes, dec.rows)
        ]
        return nms(dets, cfg.nms_threshold)[: cfg.max_detections]


# --- PointPillars ----------------------------------------------------------


@dataclass(frozen=True)
class PointPillarsPipelineConfig:
    pillars: PillarConfig = field(default_factory=PillarConfig)
    pfn: PFNToyConfig | None = None  # (P, N) follow the pillar config when omitted
    backbone: PointPillarsToyConfig | None = None  # grid / anchors follow the pillar config
    pfn_precision: str = "f32"
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_threshold: float = 0.5
    top_k: int = 1000
    max_detections: int = 100
    class_names: tuple[str, ...] = KITTI_CLASSES
    graph: str | None = None
    pfn_graph: str | None = None

    def __post_init__(self):
        p = self.pillars
        pfn = self.pfn or PFNToyConfig()
        pfn = dataclasses.replace(pfn, max_pillars=p.max_pillars, max_points=p.max_points)
        object.__setattr__(self, "pfn", pfn)
        bb = self.backbone or PointPillarsToyConfig()
        base = bb.anchors or AnchorConfig3D()
        anchors = dataclasses.replace(base, x_range=p.x_range, y_range=p.y_range)
        bb = dataclasses.replace(bb, in_channels=pfn.out_features, grid=p.grid_shape, anchors=anchors)
        object.__setattr__(self, "backbone", bb)
        if DType.parse(self.pfn_precision) is DType.I8:
            raise ValueError(PFN_INT8_REJECTION)
        if len(self.class_names) != bb.num_classes:
            raise ValueError("class_names must have one entry per anchor class")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PointPillarsPipelineConfig":
        doc = dict(doc)
        doc.pop("pipeline", None)
        pillars = _dataclass_from(PillarConfig, doc.pop("pillars", None))
        pfn = doc.pop("pfn", None)
        pfn = _dataclass_from(PFNToyConfig, pfn) if pfn is not None else None
        bb = doc.pop("backbone", None)
        if bb is not None:
            bb = dict(bb)
            if "anchors" in bb:
                bb["anchors"] = _dataclass_from(AnchorConfig3D, bb["anchors"])
            bb = _dataclass_from(PointPillarsToyConfig, bb)
        return _dataclass_from(cls, doc, pillars=pillars, pfn=pfn, backbone=bb)


class PointPillarsPipeline:
    name = "pointpillars"
    stages = ("preprocess", "pfn", "scatter", "cnn2d", "postprocess")

    def __init__(self, cfg: PointPillarsPipelineConfig = PointPillarsPipelineConfig(), graph=None, pfn_graph=None):
        self.cfg = cfg
        if pfn_graph is None:
            pfn_graph = load_graph(cfg.pfn_graph) if cfg.pfn_graph else build_pfn_toy(cfg.pfn)
        if graph is None:
            graph = load_graph(cfg.graph) if cfg.graph else build_pointpillars_2dcnn_toy(cfg.backbone)
        p = cfg.pillars
        (pin,) = pfn_graph.inputs
        if tuple(pfn_graph.inputs[pin]) != (p.max_pillars, p.max_points, 9):
            raise ValueError(f"PFN graph input {pfn_graph.inputs[pin]} does not match P={p.max_pillars}, N={p.max_points}")
        (self.input_name,) = graph.inputs
        h, w = p.grid_shape
        if tuple(graph.inputs[self.input_name])[1:] != (h, w):
            raise ValueError(f"2D CNN input {graph.inputs[self.input_name]} does not match BEV grid {h}x{w}")
        self.pfn_graph = pfn_graph
        self.graph = graph
        self.anchors = graph.constants["anchors"].numpy()
        self.acfg = cfg.backbone.anchor_config()

    @property
    def main_graph(self) -> Graph:
        return self.graph

    def macs(self) -> dict[str, int]:
        return {"pfn": flop_count(self.pfn_graph), "cnn2d": flop_count(self.graph)}

    def load_frames(self, input_dir: str | Path) -> list[tuple[str, Path]]:
        d = Path(input_dir)
        files = sorted(list(d.glob("*.bin")) + list(d.glob("*.jsonl")))
        if not files:
            raise FileNotFoundError(f"no .bin / .jsonl point clouds in {input_dir}")
        return [(f.stem, f) for f in files]

    def bev(self, pc: PointCloud) -> Tensor:
        batch = pillarize(pc, self.cfg.pillars)
        enc = pfn_forward(batch, self.pfn_graph, self.cfg.pfn_precision)
        return scatter(enc, batch.coords, batch.num_pillars, batch.grid_shape)

    def graph_inputs(self, path: Path) -> dict[str, Tensor]:
        return {self.input_name: self.bev(load_points(path))}

    def run_frame(self, frame: str, path: Path, precision="f32", calib=None, timer=None):
        dt = _check_precision(precision, calib, self.graph)
        timer = timer or _Timer()
        with timer.stage("preprocess"):
            pc = load_points(path)
            batch = pillarize(pc, self.cfg.pillars)
        with timer.stage("pfn"):
            enc = pfn_forward(batch, self.pfn_graph, self.cfg.pfn_precision)
        with timer.stage("scatter"):
            bev = scatter(enc, batch.coords, batch.num_pillars, batch.grid_shape)
        with timer.stage("cnn2d"):
            out = execute(self.graph, {self.input_name: bev}, dt, calib)
        with timer.stage("postprocess"):
            dets = self.postprocess(out, frame)
        return dets, timer.times

    def postprocess(self, out: Mapping[str, Tensor], frame: str) -> list[Detection]:
        cfg = self.cfg
        a, k = self.acfg.per_cell, len(self.acfg.sizes)
        logits = _flatten_head(out["cls"].numpy(), a, k)
        deltas = _flatten_head(out["box"].numpy(), a, 7)
        dirs = _flatten_head(out["dir"].numpy(), a, 2)
        hits = score_filter(logits, cfg.score_threshold).top(cfg.top_k)
        idx = hits.anchors
        dec = decode_3d(self.anchors[idx], deltas[idx], dirs[idx])
        dets = [
            Detection(Box3D(*(float(v) for v in box)), float(hits.scores[r]), int(hits.classes[r]), frame)
            for box, r in zip(dec.boxes, dec.rows)
        ]
        return nms(dets, cfg.nms_threshold)[: cfg.max_detections]


# --- construction and driving ------------------------------------------------

PIPELINES = {"retinanet": (RetinaNetPipelineConfig, RetinaNetPipeline), "pointpillars": (PointPillarsPipelineConfig, PointPillarsPipeline)}


def build_pipeline(kind: str, doc: Mapping[str, Any] | None = None, graph: Graph | None = None):
    if kind not in PIPELINES:
        raise ValueError(f"unknown pipeline {kind!r}; choose from {sorted(PIPELINES)}")
    cfg_cls, pipe_cls = PIPELINES[kind]
    return pipe_cls(cfg_cls.from_dict(doc or {}), graph=graph)


def run_pipeline(
    pipe,
    frames: Sequence[tuple[str, Path]],
    precision="f32",
    calib=None,
    skip_frames: int = DEFAULT_SKIP_FRAMES,
    power_label: str = "",
) -> tuple[list[Detection], RuntimeReport]:
    """Run every frame sequentially; warm-up frames are excluded from the means."""
    if skip_frames < 0:
        raise ValueError("skip_frames must be >= 0")
    dets, timings = [], []
    for frame, path in frames:
        if not Path(path).exists():
            raise FileNotFoundError(f"missing input file {path}")
        d, t = pipe.run_frame(frame, path, precision, calib)
        dets.extend(d)
        timings.append(t)
    report = RuntimeReport.from_timings(
        pipe.name, DType.parse(precision).name.lower(), pipe.stages, timings, skip_frames, power_label, pipe.macs()
    )
    return dets, report
