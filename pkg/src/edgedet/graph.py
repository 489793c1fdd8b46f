"""Static computation graphs executable in F32, F16 or Int8.

A graph holds only tensor arithmetic with fixed shapes. Anything data
dependent (score thresholds, decoding, NMS, pillar grouping) lives in the
pipeline modules instead.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .tensor import DType, QMAX, QuantParams, Tensor, load_etf, round_f16, save_etf

NODE_KINDS = (
    "Conv2d",
    "Linear",
    "ReLU",
    "BatchNormFolded",
    "MaxReduce",
    "Concat",
    "UpsampleNearest2x",
    "Add",
)
WEIGHTED_KINDS = ("Conv2d", "Linear")

Shape = tuple[int, ...]
Observer = Callable[[str, np.ndarray], None]


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    inputs: tuple[str, ...]
    output: str
    attrs: Mapping = field(default_factory=dict)
    weight: str | None = None
    bias: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", dict(self.attrs))


@dataclass(frozen=True, eq=False)
class Graph:
    nodes: tuple[Node, ...]
    inputs: Mapping[str, Shape]
    outputs: tuple[str, ...]
    constants: Mapping[str, Tensor] = field(default_factory=dict)
    name: str = "graph"
    allow_int8: bool = True

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "inputs", {k: tuple(int(d) for d in v) for k, v in self.inputs.items()})
        object.__setattr__(self, "constants", dict(self.constants))

    @property
    def edges(self) -> list[str]:
        """Activation edges: graph inputs followed by node outputs."""
        return list(self.inputs) + [n.output for n in self.nodes]

    @property
    def weight_constants(self) -> list[str]:
        seen: list[str] = []
        for n in self.nodes:
            if n.kind in WEIGHTED_KINDS and n.weight not in seen:
                seen.append(n.weight)
        return seen

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


# --- shape inference -------------------------------------------------------


def conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _axis(axis: int, rank: int, node: Node) -> int:
    if not -rank <= axis < rank:
        raise GraphError(f"node {node.name!r}: axis {axis} out of range for rank {rank}")
    return axis % rank


def _const_shape(g: Graph, name: str | None, node: Node, role: str) -> Shape:
    if name is None:
        raise GraphError(f"node {node.name!r}: {node.kind} requires a {role} constant")
    if name not in g.constants:
        raise GraphError(f"node {node.name!r}: unknown constant {name!r}")
    return g.constants[name].shape


def _infer(g: Graph, node: Node, shapes: list[Shape]) -> Shape:
    kind, a = node.kind, node.attrs

    def fail(msg: str):
        raise GraphError(f"node {node.name!r} ({kind}): {msg}")

    arity = {"Concat": None, "Add": 2}.get(kind, 1)
    if arity is not None and len(shapes) != arity:
        fail(f"expects {arity} input(s), got {len(shapes)}")
    if kind == "Concat" and not shapes:
        fail("needs at least one input")

    if kind == "Conv2d":
        (s,) = shapes
        if len(s) not in (3, 4):
            fail(f"expects (C,H,W) or (B,C,H,W) input, got {s}")
        k, stride, pad = int(a["kernel"]), int(a.get("stride", 1)), int(a.get("padding", 0))
        out_ch = int(a["out_channels"])
        ws = _const_shape(g, node.weight, node, "weight")
        if ws != (out_ch, s[-3], k, k):
            fail(f"weight shape {ws} does not match {(out_ch, s[-3], k, k)}")
        if node.bias is not None and _const_shape(g, node.bias, node, "bias") != (out_ch,):
            fail("bias shape mismatch")
        ho, wo = conv_out(s[-2], k, stride, pad), conv_out(s[-1], k, stride, pad)
        if ho < 1 or wo < 1:
            fail(f"input {s} too small for kernel {k}")
        return (*s[:-3], out_ch, ho, wo)
    if kind == "Linear":
        (s,) = shapes
        out_f = int(a["out_features"])
        ws = _const_shape(g, node.weight, node, "weight")
        if ws != (out_f, s[-1]):
            fail(f"weight shape {ws} does not match {(out_f, s[-1])}")
        if node.bias is not None and _const_shape(g, node.bias, node, "bias") != (out_f,):
            fail("bias shape mismatch")
        return (*s[:-1], out_f)
    if kind == "ReLU":
        return shapes[0]
    if kind == "BatchNormFolded":
        (s,) = shapes
        ax = _axis(int(a.get("axis", -1)), len(s), node)
        for role, cname in (("scale", node.weight), ("shift", node.bias)):
            if _const_shape(g, cname, node, role) != (s[ax],):
                fail(f"{role} must have {s[ax]} entries")
        return s
    if kind == "MaxReduce":
        (s,) = shapes
        if len(s) < 2:
            fail("cannot reduce a rank-1 tensor")
        ax = _axis(int(a["axis"]), len(s), node)
        return s[:ax] + s[ax + 1 :]
    if kind == "Concat":
        rank = len(shapes[0])
        ax = _axis(int(a["axis"]), rank, node)
        for s in shapes[1:]:
            if len(s) != rank or any(s[d] != shapes[0][d] for d in range(rank) if d != ax):
                fail(f"incompatible input shapes {shapes}")
        return shapes[0][:ax] + (sum(s[ax] for s in shapes),) + shapes[0][ax + 1 :]
    if kind == "UpsampleNearest2x":
        (s,) = shapes
        if len(s) < 2:
            fail("needs at least two spatial dims")
        return (*s[:-2], 2 * s[-2], 2 * s[-1])
    if kind == "Add":
        if shapes[0] != shapes[1]:
            fail(f"shape mismatch {shapes[0]} vs {shapes[1]}")
        return shapes[0]
    fail("unknown node kind")


def validate(g: Graph, input_shapes: Mapping[str, Shape] | None = None) -> dict[str, Shape]:
    """Infer every edge shape, raising ``GraphError`` at the first bad node."""
    shapes: dict[str, Shape] = {}
    given = dict(g.inputs)
    if input_shapes:
        given.update({k: tuple(v) for k, v in input_shapes.items()})
    for name, s in given.items():
        if name in g.constants:
            raise GraphError(f"input {name!r} shadows a constant")
        shapes[name] = tuple(int(d) for d in s)
    produced_later = {n.output for n in g.nodes}
    for node in g.nodes:
        if node.kind not in NODE_KINDS:
            raise GraphError(f"node {node.name!r}: unknown kind {node.kind!r}")
        in_shapes = []
        for src in node.inputs:
            if src in shapes:
                in_shapes.append(shapes[src])
            elif src in g.constants:
                in_shapes.append(g.constants[src].shape)
            elif src in produced_later:
                raise GraphError(f"node {node.name!r}: input {src!r} is produced later (cycle or bad order)")
            else:
                raise GraphError(f"node {node.name!r}: dangling input edge {src!r}")
        if node.output in shapes or node.output in g.constants:
            raise GraphError(f"node {node.name!r}: output {node.output!r} is already defined")
        shapes[node.output] = _infer(g, node, in_shapes)
    for out in g.outputs:
        if out not in shapes and out not in g.constants:
            raise GraphError(f"graph output {out!r} is never produced")
    return shapes


# --- MAC counting ----------------------------------------------------------


def node_macs(g: Graph, input_shapes: Mapping[str, Shape] | None = None) -> dict[str, int]:
    shapes = validate(g, input_shapes)
    out: dict[str, int] = {}
    for node in g.nodes:
        o = shapes[node.output]
        n_out = math.prod(o)
        if node.kind == "Conv2d":
            src = shapes.get(node.inputs[0]) or g.constants[node.inputs[0]].shape
            k = int(node.attrs["kernel"])
            out[node.name] = n_out * src[-3] * k * k
        elif node.kind == "Linear":
            src = shapes.get(node.inputs[0]) or g.constants[node.inputs[0]].shape
            out[node.name] = n_out * src[-1]
        elif node.kind == "MaxReduce":
            src = shapes.get(node.inputs[0]) or g.constants[node.inputs[0]].shape
            out[node.name] = math.prod(src)
        else:
            out[node.name] = n_out
    return out


def flop_count(g: Graph, input_shapes: Mapping[str, Shape] | None = None) -> int:
    """Multiply-accumulate count of one forward pass."""
    return sum(node_macs(g, input_shapes).values())


# --- kernels ---------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    # x: (B, C, H, W) -> (B, Ho, Wo, C, k, k)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d_array(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    batched = x.ndim == 4
    xb = x if batched else x[None]
    k = w.shape[-1]
    cols = _im2col(xb, k, stride, pad)
    b, ho, wo = cols.shape[:3]
    mat = cols.reshape(b * ho * wo, -1)
    y = mat @ w.reshape(w.shape[0], -1).T
    y = y.reshape(b, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    return y if batched else y[0]


def _channel_view(v: np.ndarray, axis: int, rank: int) -> np.ndarray:
    shape = [1] * rank
    shape[axis] = -1
    return v.reshape(shape)


def _upsample2x(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def _float_node(node: Node, args: list[np.ndarray], const: Callable[[str], np.ndarray]) -> np.ndarray:
    a = node.attrs
    kind = node.kind
    if kind == "Conv2d":
        y = conv2d_array(args[0], const(node.weight), int(a.get("stride", 1)), int(a.get("padding", 0)))
        if node.bias is not None:
            y = y + const(node.bias)[:, None, None]
        return y
    if kind == "Linear":
        y = args[0] @ const(node.weight).T
        if node.bias is not None:
            y = y + const(node.bias)
        return y
    if kind == "ReLU":
        return np.maximum(args[0], 0)
    if kind == "BatchNormFolded":
        x = args[0]
        ax = int(a.get("axis", -1)) % x.ndim
        return x * _channel_view(const(node.weight), ax, x.ndim) + _channel_view(const(node.bias), ax, x.ndim)
    if kind == "MaxReduce":
        return args[0].max(axis=int(a["axis"]))
    if kind == "Concat":
        return np.concatenate(args, axis=int(a["axis"]))
    if kind == "UpsampleNearest2x":
        return _upsample2x(args[0])
    if kind == "Add":
        return args[0] + args[1]
    raise GraphError(f"node {node.name!r}: unknown kind {kind!r}")


# Int8 values travel as (int8 array, scale).
QValue = tuple


def _requant(q: np.ndarray, multiplier: float) -> np.ndarray:
    """Rescale integers by ``multiplier`` in float32, round half to even, saturate."""
    y = np.rint(q.astype(np.float32) * np.float32(multiplier))
    return np.clip(y, -QMAX, QMAX).astype(np.int8)


def _to_scale(v: QValue, scale: float) -> np.ndarray:
    q, s = v
    if s == scale:
        return q
    return _requant(q, s / scale)


def _int_node(node: Node, args: list[QValue], out_scale: float, weights: Callable, const_f32: Callable) -> QValue:
    a = node.attrs
    kind = node.kind
    if kind in WEIGHTED_KINDS:
        (xq, xs) = args[0]
        wq, ws = weights(node.weight)
        acc_scale = xs * ws
        # integer products summed in float64 are exact here (|acc| < 2**31 << 2**53)
        xf = xq.astype(np.float64)
        wf = wq.astype(np.float64)
        if kind == "Conv2d":
            acc = conv2d_array(xf, wf, int(a.get("stride", 1)), int(a.get("padding", 0)))
        else:
            acc = xf @ wf.T
        acc = acc.astype(np.int64)
        if np.any(np.abs(acc) > np.iinfo(np.int32).max):
            raise OverflowError(f"node {node.name!r}: Int32 accumulator overflow")
        if node.bias is not None:
            bias_q = np.rint(const_f32(node.bias).astype(np.float64) / acc_scale).astype(np.int64)
            bias_q = np.clip(bias_q, np.iinfo(np.int32).min, np.iinfo(np.int32).max)
            acc = acc + (bias_q[:, None, None] if kind == "Conv2d" else bias_q)
        return _requant(acc, acc_scale / out_scale), out_scale
    if kind == "ReLU":
        q, s = args[0]
        return _to_scale((np.maximum(q, 0), s), out_scale), out_scale
    if kind == "MaxReduce":
        q, s = args[0]
        return _to_scale((q.max(axis=int(a["axis"])), s), out_scale), out_scale
    if kind == "UpsampleNearest2x":
        q, s = args[0]
        return _to_scale((_upsample2x(q), s), out_scale), out_scale
    if kind == "Concat":
        parts = [_to_scale(v, out_scale) for v in args]
        return np.concatenate(parts, axis=int(a["axis"])), out_scale
    if kind == "Add":
        common = max(args[0][1], args[1][1])
        total = _to_scale(args[0], common).astype(np.int32) + _to_scale(args[1], common).astype(np.int32)
        return _requant(total, common / out_scale), out_scale
    if kind == "BatchNormFolded":
        # the folded affine is evaluated in float32 on the dequantized input
        q, s = args[0]
        ax = int(a.get("axis", -1)) % q.ndim
        scale = _channel_view(const_f32(node.weight), ax, q.ndim)
        shift = _channel_view(const_f32(node.bias), ax, q.ndim)
        x = q.astype(np.float32) * np.float32(s)
        y = (x * scale + shift) / np.float32(out_scale)
        return np.clip(np.rint(y), -QMAX, QMAX).astype(np.int8), out_scale
    raise GraphError(f"node {node.name!r}: unknown kind {kind!r}")


def _scale_of(calib: Mapping, name: str) -> float:
    if name not in calib:
        raise KeyError(f"missing calibration entry for edge {name!r}")
    entry = calib[name]
    return QuantParams(entry.scale).scale


def execute(
    g: Graph,
    inputs: Mapping[str, Tensor],
    precision: str | DType = DType.F32,
    calib: Mapping | None = None,
    observe: Observer | None = None,
) -> dict[str, Tensor]:
    """Run the graph and return its outputs as F32 tensors.

    ``calib`` maps edge and weight-constant names to objects with a
    ``scale`` attribute (``QuantParams`` or calibration-table entries) and is
    required for Int8. ``observe(edge, values)`` is called with the float32
    value of every activation edge, in execution order.
    """
    precision = DType.parse(precision)
    shapes = validate(g)
    for name, shape in g.inputs.items():
        if name not in inputs:
            raise KeyError(f"missing graph input {name!r}")
        if tuple(inputs[name].shape) != shape:
            raise ValueError(f"input {name!r} has shape {inputs[name].shape}, graph expects {shape}")

    if precision is DType.I8:
        return _execute_int8(g, inputs, calib, observe)

    half = precision is DType.F16
    rnd = round_f16 if half else (lambda x: np.asarray(x, dtype=np.float32))
    cache: dict[str, np.ndarray] = {}

    def const(name: str) -> np.ndarray:
        if name not in cache:
            cache[name] = rnd(g.constants[name].numpy())
        return cache[name]

    values: dict[str, np.ndarray] = {}
    for name in g.inputs:
        values[name] = rnd(inputs[name].numpy())
        if observe:
            observe(name, values[name])
    for node in g.nodes:
        args = [values[s] if s in values else const(s) for s in node.inputs]
        y = rnd(_float_node(node, args, const))
        if y.shape != shapes[node.output]:
            raise AssertionError(f"node {node.name!r} produced {y.shape}, expected {shapes[node.output]}")
        values[node.output] = y
        if observe:
            observe(node.output, y)
    return {o: Tensor(values[o] if o in values else g.constants[o].numpy()) for o in g.outputs}


def _execute_int8(g: Graph, inputs, calib, observe) -> dict[str, Tensor]:
    if not g.allow_int8:
        raise GraphError(f"graph {g.name!r} does not admit Int8 execution")
    if calib is None:
        raise ValueError("Int8 execution requires a calibration table")
    for edge in g.edges + g.weight_constants:
        _scale_of(calib, edge)

    wcache: dict[str, QValue] = {}

    def weights(name: str) -> QValue:
        if name not in wcache:
            s = _scale_of(calib, name)
            wq = np.clip(np.rint(g.constants[name].numpy().astype(np.float64) / s), -QMAX, QMAX)
            wcache[name] = (wq.astype(np.int8), s)
        return wcache[name]

    def const_f32(name: str) -> np.ndarray:
        return g.constants[name].numpy()

    values: dict[str, QValue] = {}
    for name in g.inputs:
        s = _scale_of(calib, name)
        x = inputs[name].numpy()
        values[name] = (np.clip(np.rint(x.astype(np.float64) / s), -QMAX, QMAX).astype(np.int8), s)
    if observe:
        for name in g.inputs:
            observe(name, _dequant(values[name]))
    for node in g.nodes:
        args = []
        for src in node.inputs:
            if src in values:
                args.append(values[src])
            else:
                # constant used as an activation operand is quantized with its own entry
                args.append(weights(src))
        values[node.output] = _int_node(node, args, _scale_of(calib, node.output), weights, const_f32)
        if observe:
            observe(node.output, _dequant(values[node.output]))
    return {o: Tensor(_dequant(values[o]) if o in values else g.constants[o].numpy()) for o in g.outputs}


def _dequant(v: QValue) -> np.ndarray:
    q, s = v
    return (q.astype(np.float64) * s).astype(np.float32)


# --- JSON graph files ------------------------------------------------------


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def graph_to_dict(g: Graph, constant_paths: Mapping[str, str]) -> dict:
    return {
        "name": g.name,
        "allow_int8": g.allow_int8,
        "inputs": [{"name": k, "shape": list(v)} for k, v in g.inputs.items()],
        "outputs": list(g.outputs),
        "constants": dict(constant_paths),
        "nodes": [
            {
                "name": n.name,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "output": n.output,
                "attrs": dict(n.attrs),
                **({"weight": n.weight} if n.weight is not None else {}),
                **({"bias": n.bias} if n.bias is not None else {}),
            }
            for n in g.nodes
        ],
    }


def save_graph(g: Graph, path: str | Path) -> Path:
    """Write ``path`` (JSON) plus one ETF file per constant beside it."""
    path = Path(path)
    const_dir = path.with_suffix("").name + ".constants"
    (path.parent / const_dir).mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, t in sorted(g.constants.items()):
        rel = f"{const_dir}/{_safe(name)}.etf"
        save_etf(t, path.parent / rel)
        paths[name] = rel
    path.write_text(json.dumps(graph_to_dict(g, paths), indent=2) + "\n")
    return path


def graph_from_dict(doc: Mapping, base_dir: str | Path = ".") -> Graph:
    base = Path(base_dir)
    try:
        constants = {name: load_etf(base / rel) for name, rel in doc.get("constants", {}).items()}
        nodes = [
            Node(
                name=n["name"],
                kind=n["kind"],
                inputs=tuple(n["inputs"]),
                output=n["output"],
                attrs=n.get("attrs", {}),
                weight=n.get("weight"),
                bias=n.get("bias"),
            )
            for n in doc["nodes"]
        ]
        inputs = {i["name"]: tuple(i["shape"]) for i in doc["inputs"]}
        g = Graph(nodes, inputs, tuple(doc["outputs"]), constants, doc.get("name", "graph"), doc.get("allow_int8", True))
    except KeyError as exc:
        raise GraphError(f"graph description is missing field {exc}") from None
    validate(g)
    return g


def load_graph(path: str | Path) -> Graph:
    path = Path(path)
    return graph_from_dict(json.loads(path.read_text()), path.parent)


def describe(g: Graph) -> dict:
    shapes = validate(g)
    macs = node_macs(g)
    return {
        "name": g.name,
        "allow_int8": g.allow_int8,
        "inputs": {k: list(v) for k, v in g.inputs.items()},
        "outputs": {o: list(shapes[o]) if o in shapes else list(g.constants[o].shape) for o in g.outputs},
        "nodes": [
            {"name": n.name, "kind": n.kind, "output": n.output, "shape": list(shapes[n.output]), "macs": macs[n.name]}
            for n in g.nodes
        ],
        "total_macs": sum(macs.values()),
    }
