"""Detection evaluation: greedy matching, per-class AP, mAP and weighted mAP."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .postproc import Detection, iou_for, nms_order

log = logging.getLogger(__name__)

KITTI_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
KITTI_RECALL_POINTS = 40
DEFAULT_IOU = 0.5


@dataclass
class GroundTruthSet:
    """Ground-truth boxes keyed by frame, each entry ``(class_id, box)``."""

    frames: dict[str, list[tuple[int, object]]] = field(default_factory=dict)

    @classmethod
    def from_detections(cls, records: Sequence[Detection]) -> "GroundTruthSet":
        frames: dict[str, list] = defaultdict(list)
        for r in records:
            frames[r.frame].append((r.class_id, r.box))
        return cls(dict(frames))

    @property
    def counts(self) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for objs in self.frames.values():
            for c, _ in objs:
                out[c] += 1
        return dict(out)


@dataclass
class PRCurve:
    class_id: int
    iou_threshold: float
    precision: np.ndarray
    recall: np.ndarray


def _threshold(thresholds: float | Mapping[int, float], class_id: int) -> float:
    if isinstance(thresholds, Mapping):
        return float(thresholds.get(class_id, DEFAULT_IOU))
    return float(thresholds)


def sort_detections(dets: Sequence[Detection]) -> list[int]:
    """Indices by score descending, input position ascending."""
    return [int(i) for i in nms_order(np.array([d.score for d in dets], dtype=np.float64))]


def match_detections(
    dets: Sequence[Detection],
    gts: GroundTruthSet,
    iou_threshold: float | Mapping[int, float],
    iou_fn: Callable | None = None,
) -> np.ndarray:
    """TP flag per detection (aligned with ``dets``).

    Detections are visited by descending score; each takes the unmatched
    same-frame, same-class ground truth of highest IoU (lowest index on ties)
    if that IoU reaches the threshold.
    """
    flags = np.zeros(len(dets), dtype=bool)
    taken = {f: np.zeros(len(objs), dtype=bool) for f, objs in gts.frames.items()}
    for i in sort_detections(dets):
        d = dets[i]
        objs = gts.frames.get(d.frame, ())
        fn = iou_fn or iou_for(d.box)
        thr = _threshold(iou_threshold, d.class_id)
        best, best_iou = -1, -1.0
        for j, (c, box) in enumerate(objs):
            if c != d.class_id or taken[d.frame][j]:
                continue
            v = fn(d.box, box)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= thr:
            taken[d.frame][best] = True
            flags[i] = True
    return flags


def pr_curve(flags_sorted: Sequence[bool], num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(flags_sorted, dtype=bool)
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    return precision, recall


def average_precision(flags_sorted: Sequence[bool], num_gt: int, recall_points: int | None = None) -> float:
    """AP from TP flags listed in descending-score order.

    By default the all-point integral of the right-to-left precision envelope.
    With ``recall_points=R`` it averages the envelope at recalls 1/R, ..., 1
    (KITTI uses R=40).
    """
    if num_gt <= 0:
        raise ValueError("AP is undefined for a class without ground truth")
    if len(flags_sorted) == 0:
        return 0.0
    precision, recall = pr_curve(flags_sorted, num_gt)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if recall_points:
        grid = np.arange(1, recall_points + 1) / recall_points
        idx = np.searchsorted(recall, grid - 1e-12, side="left")
        vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
        return float(np.mean(vals))
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(math.fsum(steps * env))


def map_and_weighted_map(aps: Mapping[int, float], counts: Mapping[int, int]) -> tuple[float, float]:
    """Unweighted mean of the per-class APs and the mean weighted by gt counts.

    Both are computed exactly in rationals and rounded once, so a single class
    or uniform counts give exactly the plain mean.
    """
    classes = [c for c in aps if counts.get(c, 0) > 0]
    if not classes:
        raise ValueError("need at least one class with ground truth")
    m = sum(Fraction(aps[c]) for c in classes) / len(classes)
    total = sum(counts[c] for c in classes)
    wm = sum(Fraction(aps[c]) * counts[c] for c in classes) / total
    return float(m), float(wm)


@dataclass
class EvalResult:
    ap: dict[int, float]
    num_gt: dict[int, int]
    num_det: dict[int, int]
    iou_thresholds: dict[int, float]
    mAP: float
    weighted_mAP: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        def name(c):
            return class_names[c] if class_names and c < len(class_names) else str(c)

        return {
            "classes": [
                {
                    "class": name(c),
                    "ap": self.ap[c],
                    "num_gt": self.num_gt.get(c, 0),
                    "num_det": self.num_det.get(c, 0),
                    "iou_threshold": self.iou_thresholds[c],
                }
                for c in sorted(self.ap)
            ],
            "mAP": self.mAP,
            "weighted_mAP": self.weighted_mAP,
            "warnings": list(self.warnings),
        }


def evaluate(
    dets: Sequence[Detection],
    gts: GroundTruthSet | Sequence[Detection],
    iou_threshold: float | Mapping[int, float] = 0.5,
    recall_points: int | None = None,
    iou_fn: Callable | None = None,
) -> EvalResult:
    """Per-class AP plus mAP / weighted mAP over classes that have ground truth.

    A class that only appears in the detections gets AP 0 and a warning, and
    is left out of both means.
    """
    if not isinstance(gts, GroundTruthSet):
        gts = GroundTruthSet.from_detections(gts)
    counts = gts.counts
    flags = match_detections(dets, gts, iou_threshold, iou_fn)
    order = sort_detections(dets)
    classes = sorted(set(counts) | {d.class_id for d in dets})
    ap, ndet, thr, warnings = {}, {}, {}, []
    for c in classes:
        sel = [flags[i] for i in order if dets[i].class_id == c]
        ndet[c] = len(sel)
        thr[c] = _threshold(iou_threshold, c)
        if counts.get(c, 0) == 0:
            msg = f"class {c} has detections but no ground truth; AP set to 0 and excluded from means"
            log.warning(msg)
            warnings.append(msg)
            ap[c] = 0.0
            continue
        ap[c] = average_precision(sel, counts[c], recall_points)
    if counts:
        m, wm = map_and_weighted_map(ap, counts)
    else:
        warnings.append("no ground truth objects; means undefined")
        m = wm = float("nan")
    return EvalResult(ap, counts, ndet, thr, m, wm, warnings)


# --- reports ---------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def markdown_table(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(v) for v in r) + " |")
    return "\n".join(lines) + "\n"


def metrics_markdown(result: EvalResult, class_names: Sequence[str] | None = None) -> str:
    doc = result.to_dict(class_names)
    rows = [(c["class"], c["iou_threshold"], c["num_gt"], c["num_det"], c["ap"]) for c in doc["classes"]]
    rows.append(("mAP", "", "", "", result.mAP))
    rows.append(("weighted mAP", "", "", "", result.weighted_mAP))
    return markdown_table(("class", "IoU", "GT", "detections", "AP"), rows)
