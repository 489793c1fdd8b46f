"""Activation histograms and the MinMax / entropy Int8 calibrators."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .tensor import QMAX, QuantParams, Tensor

if TYPE_CHECKING:
    from .graph import Graph

log = logging.getLogger(__name__)

DEFAULT_NUM_BINS = 2048
QUANTIZED_BINS = 128
KL_EPSILON = 1e-10
# candidates whose divergence is within this band of the minimum count as ties
KL_TIE_RTOL = 1e-9
KL_TIE_ATOL = 1e-12

METHODS = ("minmax", "entropy")


class CalibrationError(ValueError):
    pass


@dataclass(eq=False)
class ActivationHistogram:
    """Histogram of absolute activation values.

    Bin ``i`` covers ``[i * bin_width, (i + 1) * bin_width)``. When
    ``bin_width`` is None it is fixed by the first non-zero batch as
    ``amax / num_bins``. Values beyond the range trigger pairwise merging of
    bins (doubling ``bin_width``) until everything fits. ``zeros`` counts
    the exact zeros, which are also included in ``counts[0]``.
    """

    num_bins: int = DEFAULT_NUM_BINS
    bin_width: float | None = None
    counts: np.ndarray = field(default=None)
    amax: float = 0.0
    total: int = 0
    nonfinite: int = 0
    zeros: int = 0

    def __post_init__(self):
        if self.num_bins < 2 or self.num_bins % 2:
            raise ValueError("num_bins must be an even integer >= 2")
        if self.bin_width is not None and not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if self.counts is None:
            self.counts = np.zeros(self.num_bins, dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64).copy()
            if self.counts.shape != (self.num_bins,):
                raise ValueError("counts must have num_bins entries")
        if not 0 <= self.zeros <= self.counts[0]:
            raise ValueError("zeros must lie between 0 and counts[0]")

    @property
    def range(self) -> float:
        return self.num_bins * (self.bin_width or 0.0)

    def copy(self) -> "ActivationHistogram":
        return ActivationHistogram(
            self.num_bins, self.bin_width, self.counts, self.amax, self.total, self.nonfinite, self.zeros
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ActivationHistogram):
            return NotImplemented
        return (
            self.num_bins == other.num_bins
            and self.bin_width == other.bin_width
            and np.array_equal(self.counts, other.counts)
            and self.amax == other.amax
            and self.total == other.total
            and self.nonfinite == other.nonfinite
            and self.zeros == other.zeros
        )

    def _doubled(self) -> "ActivationHistogram":
        merged = self.counts.reshape(-1, 2).sum(axis=1)
        counts = np.concatenate([merged, np.zeros(self.num_bins // 2, dtype=np.int64)])
        return ActivationHistogram(
            self.num_bins, self.bin_width * 2.0, counts, self.amax, self.total, self.nonfinite, self.zeros
        )

    def widened_to(self, amax: float) -> "ActivationHistogram":
        h = self
        while amax > h.range:
            h = h._doubled()
        return h

    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.num_bins) + 0.5) * (self.bin_width or 0.0)

    def collect(self, t: "Tensor | np.ndarray") -> "ActivationHistogram":
        return collect(self, t)

    def merge(self, other: "ActivationHistogram") -> "ActivationHistogram":
        return merge(self, other)


def collect(h: ActivationHistogram, t: "Tensor | np.ndarray") -> ActivationHistogram:
    """Return ``h`` with the absolute values of ``t`` added."""
    x = t.numpy() if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
    x = np.abs(x.astype(np.float64).ravel())
    finite = np.isfinite(x)
    n_bad = int(x.size - np.count_nonzero(finite))
    if n_bad:
        x = x[finite]
    out = h.copy()
    out.nonfinite += n_bad
    if x.size == 0:
        return out
    batch_max = float(x.max())
    if out.bin_width is None:
        out.bin_width = batch_max / out.num_bins if batch_max > 0 else 1.0 / out.num_bins
    out = out.widened_to(batch_max)
    idx = np.minimum((x / out.bin_width).astype(np.int64), out.num_bins - 1)
    out.counts += np.bincount(idx, minlength=out.num_bins)
    out.zeros += int(np.count_nonzero(x == 0))
    out.amax = max(out.amax, batch_max)
    out.total += int(x.size)
    return out


def _rebinned(h: ActivationHistogram, bin_width: float) -> ActivationHistogram:
    # lossy fallback for widths that are not a power-of-two apart: move each bin by its center
    idx = np.minimum((h.bin_centers() / bin_width).astype(np.int64), h.num_bins - 1)
    counts = np.bincount(idx, weights=h.counts, minlength=h.num_bins).astype(np.int64)
    return ActivationHistogram(h.num_bins, bin_width, counts, h.amax, h.total, h.nonfinite, h.zeros)


def merge(a: ActivationHistogram, b: ActivationHistogram) -> ActivationHistogram:
    """Sum two histograms, coarsening the finer one to the common bin width."""
    if a.num_bins != b.num_bins:
        raise ValueError("cannot merge histograms with different num_bins")
    if a.bin_width is None:
        a, b = b, a
    if b.bin_width is None:
        out = a.copy()
        out.total += b.total
        out.nonfinite += b.nonfinite
        out.zeros += b.zeros
        out.amax = max(a.amax, b.amax)
        return out
    if a.bin_width > b.bin_width:
        a, b = b, a
    # a is now the finer histogram
    while a.bin_width < b.bin_width and not math.isclose(a.bin_width, b.bin_width, rel_tol=1e-12):
        if a.bin_width * 2.0 > b.bin_width * (1 + 1e-12):
            a = _rebinned(a, b.bin_width)
            break
        a = a._doubled()
    width = b.bin_width
    counts = a.counts + b.counts
    out = ActivationHistogram(
        a.num_bins,
        width,
        counts,
        max(a.amax, b.amax),
        a.total + b.total,
        a.nonfinite + b.nonfinite,
        a.zeros + b.zeros,
    )
    if out.amax > out.range:
        raise AssertionError("merged histogram does not cover its amax")
    return out


def histogram_of(values: Iterable, num_bins: int = DEFAULT_NUM_BINS, bin_width: float | None = None):
    h = ActivationHistogram(num_bins, bin_width)
    for v in values:
        h = collect(h, v)
    return h


def _require_data(h: ActivationHistogram) -> None:
    if h.total == 0 or h.amax <= 0:
        raise CalibrationError("no calibration data")


def calibrate_minmax(h: ActivationHistogram) -> QuantParams:
    _require_data(h)
    return QuantParams(h.amax / QMAX)


def kl_counts(h: ActivationHistogram) -> np.ndarray:
    """Histogram counts seen by the entropy objective: exact zeros removed."""
    c = h.counts.astype(np.int64)
    c[0] -= h.zeros
    return c


def entropy_divergences(h: ActivationHistogram) -> tuple[np.ndarray, np.ndarray]:
    """KL(P||Q) for every candidate threshold bin count ``i`` in [128, num_bins].

    Exact zeros quantize exactly at any scale, so they are taken out of bin 0
    first (a ReLU output otherwise pins the threshold with its zero spike).
    P is ``counts[:i]`` with the mass above ``i`` folded into its last bin.
    Q collapses ``counts[:i]`` into 128 groups (bin ``k`` belongs to group
    ``k * 128 // i``) and spreads each group's mass evenly over its non-empty
    bins. A bin where Q is zero but P is not gets ``KL_EPSILON`` before
    normalization. Candidates with no mass below their last bin
    (``counts[:i-1]`` empty) get an infinite divergence. Returns
    ``(candidates, kl)``.
    """
    _require_data(h)
    nb = h.num_bins
    if nb < 2 * QUANTIZED_BINS:
        raise ValueError(f"entropy calibration needs at least {2 * QUANTIZED_BINS} bins")
    c = kl_counts(h)
    if not c.any():
        raise CalibrationError("no calibration data")
    total = float(c.sum())
    cand = np.arange(QUANTIZED_BINS, nb + 1, dtype=np.int64)

    prefix = np.concatenate([[0], np.cumsum(c)])
    prefix_nz = np.concatenate([[0], np.cumsum(c > 0)])
    cf = c.astype(np.float64)
    clogc = np.where(c > 0, cf * np.log(np.where(c > 0, cf, 1.0)), 0.0)
    prefix_clogc = np.concatenate([[0.0], np.cumsum(clogc)])

    j = np.arange(QUANTIZED_BINS + 1, dtype=np.int64)
    edges = (j[None, :] * cand[:, None] + QUANTIZED_BINS - 1) // QUANTIZED_BINS  # ceil(j*i/128)
    gsum = (prefix[edges[:, 1:]] - prefix[edges[:, :-1]]).astype(np.float64)
    gnz = (prefix_nz[edges[:, 1:]] - prefix_nz[edges[:, :-1]]).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        gq = np.where(gnz > 0, gsum / np.where(gnz > 0, gnz, 1.0), 0.0)
        glogq = np.where(gsum > 0, gsum * np.log(np.where(gq > 0, gq, 1.0)), 0.0)

    last = c[cand - 1].astype(np.float64)
    outliers = total - prefix[cand].astype(np.float64)
    p_last = last + outliers
    smoothed = (last == 0) & (p_last > 0)
    q_sum = prefix[cand].astype(np.float64) + np.where(smoothed, KL_EPSILON, 0.0)
    q_last = np.where(last > 0, gq[:, -1], KL_EPSILON)

    # bins k < i-1: sum c_k * (log c_k - log T - log q_k + log Qsum)
    head_clogc = prefix_clogc[cand - 1]
    head_c = prefix[cand - 1].astype(np.float64)
    head_clogq = glogq.sum(axis=1) - np.where(last > 0, last * np.log(np.where(q_last > 0, q_last, 1.0)), 0.0)
    log_t = math.log(total)
    log_qs = np.log(q_sum)
    kl = (head_clogc - head_clogq - head_c * (log_t - log_qs)) / total
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = np.where(
            p_last > 0,
            (p_last / total) * (np.log(np.where(p_last > 0, p_last, 1.0)) - log_t - np.log(q_last) + log_qs),
            0.0,
        )
    kl = np.maximum(kl + tail, 0.0)
    # with no mass below the clip bin P and Q are the same point mass and the
    # divergence reads 0 however much is clipped; never choose such a threshold
    kl = np.where(prefix[cand - 1] > 0, kl, np.inf)
    return cand, kl


def select_threshold(candidates: np.ndarray, kl: np.ndarray) -> int:
    """Smallest candidate whose divergence ties the minimum.

    When no candidate is valid (all divergences infinite, e.g. a constant
    activation) the largest candidate, i.e. no clipping, is returned.
    """
    best = float(np.min(kl))
    if not math.isfinite(best):
        return int(candidates[-1])
    tied = kl <= best + KL_TIE_ATOL + KL_TIE_RTOL * best
    return int(candidates[np.argmax(tied)])


def entropy_threshold_index(h: ActivationHistogram) -> int:
    cand, kl = entropy_divergences(h)
    return select_threshold(cand, kl)


def calibrate_entropy(h: ActivationHistogram) -> QuantParams:
    """Scale from the KL-optimal saturation threshold.

    The threshold never exceeds the observed ``amax``, so this scale is never
    larger than the MinMax one.
    """
    i_star = entropy_threshold_index(h)
    threshold = min(i_star * h.bin_width, h.amax)
    return QuantParams(threshold / QMAX)


CALIBRATORS = {"minmax": calibrate_minmax, "entropy": calibrate_entropy}


# --- whole-graph calibration -----------------------------------------------


@dataclass(frozen=True)
class CalibEntry:
    scale: float
    method: str
    amax: float
    num_bins: int

    @property
    def qparams(self) -> QuantParams:
        return QuantParams(self.scale)



def _shard_amax(graph: "Graph", items: Sequence[Mapping[str, Tensor]]) -> dict[str, float]:
    from .graph import execute

    amax: dict[str, float] = {}

    def observe(edge: str, value: np.ndarray) -> None:
        finite = value[np.isfinite(value)]
        m = float(np.abs(finite).max()) if finite.size else 0.0
        amax[edge] = max(amax.get(edge, 0.0), m)

    for item in items:
        execute(graph, item, "f32", observe=observe)
    return amax


def _shard_histograms(graph: "Graph", items, widths: Mapping[str, float], num_bins: int):
    from .graph import execute

    hists = {e: ActivationHistogram(num_bins, w) for e, w in widths.items()}

    def observe(edge: str, value: np.ndarray) -> None:
        hists[edge] = collect(hists[edge], value)

    for item in items:
        execute(graph, item, "f32", observe=observe)
    return hists


def _shards(items: list, workers: int) -> list[list]:
    n = max(1, min(workers, len(items)))
    step = math.ceil(len(items) / n)
    return [items[k : k + step] for k in range(0, len(items), step)]


def _as_feed(graph: "Graph", item) -> dict[str, Tensor]:
    if isinstance(item, Mapping):
        return dict(item)
    if len(graph.inputs) != 1:
        raise ValueError("dataset items must be name->Tensor maps for multi-input graphs")
    return {next(iter(graph.inputs)): item}


def calibrate_graph(
    graph: "Graph",
    dataset: Sequence,
    method: str = "entropy",
    num_bins: int = DEFAULT_NUM_BINS,
    workers: int = 1,
) -> dict[str, CalibEntry]:
    """Run ``graph`` in F32 over ``dataset`` and calibrate every edge.

    Activations use ``method``; weight constants always use MinMax. Two
    passes are made so that every edge's histogram spans exactly its observed
    range. ``workers > 1`` collects shards in threads and merges them; the
    table is identical to the sequential one.
    """
    from .graph import validate

    if method not in CALIBRATORS:
        raise ValueError(f"unknown calibration method {method!r}")
    if not graph.allow_int8:
        raise CalibrationError(f"graph {graph.name!r} is not eligible for Int8 calibration")
    validate(graph)
    items = [_as_feed(graph, item) for item in dataset]
    if not items:
        raise CalibrationError("calibration dataset is empty")

    shards = _shards(items, workers)
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        amaxes = list(pool.map(lambda s: _shard_amax(graph, s), shards))
    amax: dict[str, float] = {}
    for part in amaxes:
        for edge, m in part.items():
            amax[edge] = max(amax.get(edge, 0.0), m)
    for edge in graph.edges:
        if amax.get(edge, 0.0) <= 0:
            raise CalibrationError(f"edge {edge!r} is all-zero over the calibration dataset")

    widths = {e: amax[e] / num_bins for e in graph.edges}
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        parts = list(pool.map(lambda s: _shard_histograms(graph, s, widths, num_bins), shards))
    hists = parts[0]
    for part in parts[1:]:
        hists = {e: merge(hists[e], part[e]) for e in hists}

    calibrate = CALIBRATORS[method]
    table: dict[str, CalibEntry] = {}
    for edge in graph.edges:
        h = hists[edge]
        table[edge] = CalibEntry(calibrate(h).scale, method, h.amax, num_bins)
    for name in graph.weight_constants:
        h = collect(ActivationHistogram(num_bins), graph.constants[name])
        if h.amax <= 0:
            raise CalibrationError(f"weight constant {name!r} is all-zero")
        table[name] = CalibEntry(calibrate_minmax(h).scale, "minmax", h.amax, num_bins)
    return table


def table_to_json(table: Mapping[str, CalibEntry]) -> str:
    doc = {
        name: {"scale": e.scale, "method": e.method, "amax": e.amax, "num_bins": e.num_bins}
        for name, e in table.items()
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def table_from_json(text: str) -> dict[str, CalibEntry]:
    doc = json.loads(text)
    out = {}
    for name, e in doc.items():
        try:
            out[name] = CalibEntry(float(e["scale"]), str(e["method"]), float(e["amax"]), int(e["num_bins"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed calibration entry for {name!r}: {exc}") from None
    return out


def save_table(table: Mapping[str, CalibEntry], path: str | Path) -> None:
    Path(path).write_text(table_to_json(table))


def load_table(path: str | Path) -> dict[str, CalibEntry]:
    return table_from_json(Path(path).read_text())
