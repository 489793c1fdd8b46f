"""Miniature, randomly initialised RetinaNet / PointPillars graphs.

The weights are untrained. The graphs keep the topology the experiments
exercise: residual backbone, top-down pyramid with shared heads, pillar
max-reduction, and the upsample-and-concat BEV backbone with class / box /
direction heads. Anchors are embedded as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, Node, validate
from .postproc import AnchorConfig2D, AnchorConfig3D, generate_anchors_2d, generate_anchors_3d
from .tensor import Tensor

PRIOR_PROB = 0.01


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = []
        self.constants: dict[str, Tensor] = {}

    def const(self, name: str, value: np.ndarray) -> str:
        self.constants[name] = Tensor(np.asarray(value, dtype=np.float32))
        return name

    def he(self, shape, fan_in: int) -> np.ndarray:
        return self.rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

    def conv(self, name, src, cin, cout, k=3, stride=1, pad=None, *, weight=None, bias=None, bias_value=None):
        pad = k // 2 if pad is None else pad
        if weight is None:
            weight = self.const(f"{name}.weight", self.he((cout, cin, k, k), cin * k * k))
            init = np.zeros(cout) if bias_value is None else np.full(cout, bias_value)
            bias = self.const(f"{name}.bias", init + 0.01 * self.rng.standard_normal(cout))
        self.nodes.append(
            Node(name, "Conv2d", (src,), name, {"out_channels": cout, "kernel": k, "stride": stride, "padding": pad}, weight, bias)
        )
        return name

    def op(self, name, kind, inputs, **attrs):
        self.nodes.append(Node(name, kind, tuple(inputs), name, attrs))
        return name

    def relu(self, src, name=None):
        return self.op(name or f"{src}.relu", "ReLU", (src,))


# --- RetinaNet ---------------------------------------------------------------


@dataclass(frozen=True)
class RetinaNetToyConfig:
    resolution: tuple[int, int] = (64, 128)
    stem_channels: int = 8
    stage_channels: tuple[int, int, int] = (8, 16, 32)
    fpn_channels: int = 16
    head_channels: int = 16
    num_classes: int = 5
    anchors: AnchorConfig2D = field(default_factory=AnchorConfig2D)
    seed: int = 0

    def __post_init__(self):
        if min(self.resolution) < 1 or self.num_classes < 1:
            raise ValueError("invalid RetinaNet config dimensions")
        if min((self.stem_channels, self.fpn_channels, self.head_channels, *self.stage_channels)) < 1:
            raise ValueError("channel widths must be positive")
        if tuple(self.anchors.strides) != (8, 16):
            raise ValueError("the toy backbone yields pyramid strides (8, 16)")


def _residual_stage(b: _Builder, name: str, src: str, cin: int, cout: int) -> str:
    x = b.relu(b.conv(f"{name}.conv1", src, cin, cout, stride=2))
    x = b.conv(f"{name}.conv2", x, cout, cout)
    skip = b.conv(f"{name}.proj", src, cin, cout, k=1, stride=2, pad=0)
    return b.relu(b.op(f"{name}.add", "Add", (x, skip)), f"{name}.out")


def build_retinanet_toy(cfg: RetinaNetToyConfig = RetinaNetToyConfig()) -> Graph:
    """Residual backbone (strides 2, 4, 8, 16), 2-level FPN, shared heads.

    Outputs ``cls_p3``/``box_p3`` (stride 8), ``cls_p4``/``box_p4`` (stride
    16) and the ``anchors`` constant. Class head channels are
    ``anchors_per_cell * num_classes``.
    """
    h, w = cfg.resolution
    if h % 16 or w % 16:
        raise ValueError(f"resolution {cfg.resolution} must be divisible by 16")
    b = _Builder(cfg.seed)
    c1, c2, c3 = cfg.stage_channels
    x = b.relu(b.conv("stem", "image", 3, cfg.stem_channels, stride=2))
    x = _residual_stage(b, "stage1", x, cfg.stem_channels, c1)
    c3_feat = _residual_stage(b, "stage2", x, c1, c2)
    c4_feat = _residual_stage(b, "stage3", c3_feat, c2, c3)

    f = cfg.fpn_channels
    p4_lat = b.conv("fpn.lat4", c4_feat, c3, f, k=1, pad=0)
    p3_lat = b.conv("fpn.lat3", c3_feat, c2, f, k=1, pad=0)
    up = b.op("fpn.up4", "UpsampleNearest2x", (p4_lat,))
    p3_sum = b.op("fpn.merge3", "Add", (p3_lat, up))
    p3 = b.conv("fpn.out3", p3_sum, f, f)
    p4 = b.conv("fpn.out4", p4_lat, f, f)

    a = cfg.anchors.per_cell
    k = cfg.num_classes
    hc = cfg.head_channels
    prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    # heads share weights across pyramid levels
    shared = {}
    # small output gains keep untrained logits near the prior and boxes near the anchors
    for head, out_ch, bias_value, gain in (("cls", a * k, prior, 0.1), ("box", a * 4, 0.0, 0.01)):
        shared[head] = {
            "tower.weight": b.const(f"{head}_head.tower.weight", b.he((hc, f, 3, 3), f * 9)),
            "tower.bias": b.const(f"{head}_head.tower.bias", np.zeros(hc)),
            "out.weight": b.const(f"{head}_head.out.weight", gain * b.he((out_ch, hc, 3, 3), hc * 9)),
            "out.bias": b.const(f"{head}_head.out.bias", np.full(out_ch, bias_value)),
            "out_ch": out_ch,
        }
    outputs = []
    for level, feat in (("p3", p3), ("p4", p4)):
        for head in ("cls", "box"):
            s = shared[head]
            t = b.conv(f"{head}_{level}.tower", feat, f, hc, weight=s["tower.weight"], bias=s["tower.bias"])
            t = b.relu(t)
            name = f"{head}_{level}"
            b.conv(name, t, hc, s["out_ch"], weight=s["out.weight"], bias=s["out.bias"])
            outputs.append(name)

    b.constants["anchors"] = generate_anchors_2d(cfg.resolution, cfg.anchors)
    outputs.append("anchors")
    g = Graph(b.nodes, {"image": (3, h, w)}, outputs, b.constants, "retinanet_toy")
    validate(g)
    return g


# --- PointPillars ------------------------------------------------------------


@dataclass(frozen=True)
class PFNToyConfig:
    max_pillars: int = 16000
    max_points: int = 32
    in_features: int = 9
    out_features: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.max_pillars, self.max_points, self.in_features, self.out_features) < 1:
            raise ValueError("invalid PFN config dimensions")


def build_pfn_toy(cfg: PFNToyConfig = PFNToyConfig()) -> Graph:
    """Linear -> folded BN -> ReLU -> max over points: (P, N, D) -> (P, C).

    The folded shift is non-positive, so zero-padded point rows never raise
    the pillar maximum. Weights depend on (D, C, seed) only, so graphs built
    for different (P, N) share them. The graph refuses Int8.
    """
    b = _Builder(cfg.seed)
    d, c = cfg.in_features, cfg.out_features
    w = b.const("pfn.linear.weight", b.he((c, d), d))
    b.nodes.append(Node("pfn.linear", "Linear", ("pillar_features",), "pfn.linear", {"out_features": c}, w))
    scale = b.const("pfn.bn.scale", 1.0 + 0.1 * b.rng.standard_normal(c))
    shift = b.const("pfn.bn.shift", -np.abs(0.1 * b.rng.standard_normal(c)))
    b.nodes.append(Node("pfn.bn", "BatchNormFolded", ("pfn.linear",), "pfn.bn", {"axis": -1}, scale, shift))
    b.relu("pfn.bn", "pfn.relu")
    b.op("pillar_encoding", "MaxReduce", ("pfn.relu",), axis=1)
    g = Graph(
        b.nodes,
        {"pillar_features": (cfg.max_pillars, cfg.max_points, d)},
        ("pillar_encoding",),
        b.constants,
        "pfn_toy",
        allow_int8=False,
    )
    validate(g)
    return g


@dataclass(frozen=True)
class PointPillarsToyConfig:
    in_channels: int = 64
    grid: tuple[int, int] = (496, 432)  # BEV rows (y), cols (x)
    block_channels: tuple[int, int] = (32, 64)
    up_channels: int = 32
    anchors: AnchorConfig3D | None = None  # feature_size is overwritten to grid / 2
    seed: int = 0

    def __post_init__(self):
        if self.grid[0] % 4 or self.grid[1] % 4 or min(self.grid) < 4:
            raise ValueError("BEV grid dims must be positive multiples of 4")
        if min(self.in_channels, self.up_channels, *self.block_channels) < 1:
            raise ValueError("channel widths must be positive")

    def anchor_config(self) -> AnchorConfig3D:
        base = self.anchors or AnchorConfig3D()
        return AnchorConfig3D(
            base.x_range, base.y_range, (self.grid[0] // 2, self.grid[1] // 2), base.sizes, base.z_centers, base.rotations
        )

    @property
    def num_classes(self) -> int:
        return len(self.anchor_config().sizes)


def build_pointpillars_2dcnn_toy(cfg: PointPillarsToyConfig = PointPillarsToyConfig()) -> Graph:
    """Two downsampling blocks, upsample-and-concat neck, class/box/direction heads.

    Heads run at half the BEV resolution with ``classes * rotations``
    anchors per cell. Outputs ``cls``, ``box``, ``dir`` and ``anchors``.
    """
    b = _Builder(cfg.seed)
    c1, c2 = cfg.block_channels
    u = cfg.up_channels
    x = b.relu(b.conv("block1.conv1", "bev", cfg.in_channels, c1, stride=2))
    f1 = b.relu(b.conv("block1.conv2", x, c1, c1))
    x = b.relu(b.conv("block2.conv1", f1, c1, c2, stride=2))
    f2 = b.relu(b.conv("block2.conv2", x, c2, c2))
    u1 = b.relu(b.conv("up1", f1, c1, u, k=1, pad=0))
    u2 = b.relu(b.conv("up2", b.op("up2.resize", "UpsampleNearest2x", (f2,)), c2, u, k=1, pad=0))
    neck = b.op("neck", "Concat", (u1, u2), axis=-3)

    acfg = cfg.anchor_config()
    a = acfg.per_cell
    k = len(acfg.sizes)
    prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    b.conv("cls", neck, 2 * u, a * k, k=1, pad=0, bias_value=prior)
    b.conv("box", neck, 2 * u, a * 7, k=1, pad=0)
    b.conv("dir", neck, 2 * u, a * 2, k=1, pad=0)
    # small head gains keep untrained logits near the prior and boxes near the anchors
    for head, gain in (("cls", 0.1), ("box", 0.01), ("dir", 0.1)):
        w = b.constants[f"{head}.weight"].numpy() * gain
        b.constants[f"{head}.weight"] = Tensor(w)
    b.constants["anchors"] = generate_anchors_3d(acfg)
    rows, cols = cfg.grid
    g = Graph(
        b.nodes,
        {"bev": (cfg.in_channels, rows, cols)},
        ("cls", "box", "dir", "anchors"),
        b.constants,
        "pointpillars_2dcnn_toy",
    )
    validate(g)
    return g
