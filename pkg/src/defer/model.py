"""Layer-graph models: tensors, shape inference, deterministic forward passes.

A model is a DAG of layers with named weight tensors on the side.  All
tensor data is 32-bit float, row-major.  Forward evaluation is pure and
bit-reproducible: contractions run through ``np.einsum`` with a fixed
loop order (``optimize=False``), never through BLAS.
"""

from __future__ import annotations

import heapq
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CycleDetected, MissingWeight, ModelInvalid, ShapeMismatch

Shape = tuple[int, ...]

KINDS = frozenset(
    {"Input", "Dense", "Conv2D", "ReLU", "MaxPool2D", "GlobalAvgPool", "Add", "Flatten"}
)

# weight names double as file names in the on-disk model format
_NAME_RE = re.compile(r"^[A-Za-z0-9_.:-]+$")


def as_tensor(value) -> np.ndarray:
    """Coerce to a valid tensor: float32, C-contiguous, rank >= 1, extents >= 1."""
    t = np.asarray(value, dtype=np.float32)
    if t.ndim < 1:
        raise ModelInvalid("tensor rank must be >= 1")
    if any(d < 1 for d in t.shape):
        raise ModelInvalid(f"tensor extents must be >= 1, got {t.shape}")
    return np.ascontiguousarray(t)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model graph.

    ``params`` holds kind-specific integers (``units``, ``kernel``,
    ``stride``, ``pool``, ``filters``) or, for Input, the declared
    ``shape``.  ``weight_refs`` names kernel and bias tensors for Dense
    and Conv2D and is empty otherwise.
    """

    id: str
    kind: str
    params: dict = field(default_factory=dict)
    weight_refs: tuple[str, ...] = ()
    inputs: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "weight_refs", tuple(self.weight_refs))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if not self.id or not _NAME_RE.match(self.id):
            raise ModelInvalid(f"bad layer id {self.id!r}")
        if self.kind not in KINDS:
            raise ModelInvalid(f"layer {self.id!r}: unknown kind {self.kind!r}")
        arity = {"Input": 0, "Add": 2}.get(self.kind, 1)
        if len(self.inputs) != arity:
            raise ModelInvalid(
                f"layer {self.id!r}: kind {self.kind} takes {arity} inputs, "
                f"got {len(self.inputs)}"
            )
        if self.kind in ("Dense", "Conv2D"):
            if len(self.weight_refs) != 2:
                raise ModelInvalid(
                    f"layer {self.id!r}: {self.kind} needs kernel and bias refs"
                )
        elif self.weight_refs:
            raise ModelInvalid(f"layer {self.id!r}: {self.kind} takes no weights")
        if self.kind == "Input":
            shape = tuple(self.params.get("shape", ()))
            if not shape or any(int(d) < 1 for d in shape):
                raise ModelInvalid(f"layer {self.id!r}: Input needs a concrete shape")
        required = {"Dense": ("units",), "Conv2D": ("kernel", "filters"),
                    "MaxPool2D": ("pool",)}.get(self.kind, ())
        for key in required:
            if int(self.params.get(key, 0)) < 1:
                raise ModelInvalid(
                    f"layer {self.id!r}: {self.kind} needs positive param {key!r}"
                )


@dataclass(frozen=True)
class ModelGraph:
    """An acyclic layer graph plus its weight tensors.

    Exactly one Input layer exists and is ``entry``; every layer lies on
    a path from ``entry`` to ``exit``.  Construction validates all
    structural invariants and weight shapes.
    """

    layers: tuple[LayerSpec, ...]
    weights: dict[str, np.ndarray]
    entry: str
    exit: str

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        _validate_graph(self)

    def layer(self, layer_id: str) -> LayerSpec:
        return self._by_id[layer_id]

    @property
    def _by_id(self) -> dict[str, LayerSpec]:
        cached = self.__dict__.get("_by_id_cache")
        if cached is None:
            cached = {l.id: l for l in self.layers}
            self.__dict__["_by_id_cache"] = cached
        return cached

    def input_shape(self) -> Shape:
        return tuple(self.layer(self.entry).params["shape"])

    def consumers(self, layer_id: str) -> list[str]:
        return [l.id for l in self.layers if layer_id in l.inputs]

    def weight_bytes(self) -> int:
        return sum(w.nbytes for w in self.weights.values())


def topo_order(graph: ModelGraph) -> list[str]:
    """Topological order of layer ids, ties broken lexicographically.

    Raises CycleDetected if the graph is not acyclic.
    """
    indeg = {l.id: len(l.inputs) for l in graph.layers}
    ready = sorted(lid for lid, d in indeg.items() if d == 0)
    consumers: dict[str, list[str]] = {l.id: [] for l in graph.layers}
    for l in graph.layers:
        for src in l.inputs:
            consumers[src].append(l.id)
    order: list[str] = []
    heapq.heapify(ready)
    while ready:
        lid = heapq.heappop(ready)
        order.append(lid)
        for c in consumers[lid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(graph.layers):
        raise CycleDetected("layer graph contains a cycle")
    return order


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _infer_one(layer: LayerSpec, in_shapes: list[Shape]) -> Shape:
    """Output shape of one layer given its input shapes."""
    lid = layer.id
    if layer.kind == "Input":
        return tuple(in_shapes[0])
    if layer.kind == "ReLU":
        return in_shapes[0]
    if layer.kind == "Dense":
        s = in_shapes[0]
        if len(s) != 2:
            raise ShapeMismatch(lid, f"Dense expects rank 2, got {s}")
        return (s[0], int(layer.params["units"]))
    if layer.kind == "Conv2D":
        s = in_shapes[0]
        if len(s) != 4:
            raise ShapeMismatch(lid, f"Conv2D expects rank 4, got {s}")
        stride = int(layer.params.get("stride", 1))
        return (
            s[0],
            _ceil_div(s[1], stride),
            _ceil_div(s[2], stride),
            int(layer.params["filters"]),
        )
    if layer.kind == "MaxPool2D":
        s = in_shapes[0]
        if len(s) != 4:
            raise ShapeMismatch(lid, f"MaxPool2D expects rank 4, got {s}")
        stride = int(layer.params.get("stride", layer.params["pool"]))
        return (s[0], _ceil_div(s[1], stride), _ceil_div(s[2], stride), s[3])
    if layer.kind == "GlobalAvgPool":
        s = in_shapes[0]
        if len(s) != 4:
            raise ShapeMismatch(lid, f"GlobalAvgPool expects rank 4, got {s}")
        return (s[0], s[3])
    if layer.kind == "Add":
        a, b = in_shapes
        if a != b:
            raise ShapeMismatch(lid, f"Add inputs differ: {a} vs {b}")
        return a
    if layer.kind == "Flatten":
        s = in_shapes[0]
        if len(s) < 2:
            raise ShapeMismatch(lid, f"Flatten expects rank >= 2, got {s}")
        return (s[0], int(np.prod(s[1:], dtype=np.int64)))
    raise ModelInvalid(f"unknown kind {layer.kind!r}")


def infer_shapes(graph: ModelGraph, input_shape: Shape | None = None) -> dict[str, Shape]:
    """Map every layer id to its output shape.

    ``input_shape`` defaults to the Input layer's declared shape; when
    given, its rank must match the declaration.
    """
    declared = graph.input_shape()
    if input_shape is None:
        input_shape = declared
    input_shape = tuple(int(d) for d in input_shape)
    if len(input_shape) != len(declared):
        raise ShapeMismatch(
            graph.entry,
            f"input rank {len(input_shape)} != declared rank {len(declared)}",
        )
    shapes: dict[str, Shape] = {}
    for lid in topo_order(graph):
        layer = graph.layer(lid)
        if layer.kind == "Input":
            shapes[lid] = input_shape
        else:
            shapes[lid] = _infer_one(layer, [shapes[i] for i in layer.inputs])
    return shapes


def _expected_weight_shapes(layer: LayerSpec, in_shape: Shape) -> list[Shape]:
    if layer.kind == "Dense":
        units = int(layer.params["units"])
        return [(in_shape[1], units), (units,)]
    if layer.kind == "Conv2D":
        k = int(layer.params["kernel"])
        filters = int(layer.params["filters"])
        return [(k, k, in_shape[3], filters), (filters,)]
    return []


def _validate_graph(graph: ModelGraph) -> None:
    ids = [l.id for l in graph.layers]
    if len(set(ids)) != len(ids):
        raise ModelInvalid("duplicate layer ids")
    by_id = {l.id: l for l in graph.layers}
    if graph.entry not in by_id or graph.exit not in by_id:
        raise ModelInvalid("entry/exit must name existing layers")
    inputs_count = sum(1 for l in graph.layers if l.kind == "Input")
    if inputs_count != 1 or by_id[graph.entry].kind != "Input":
        raise ModelInvalid("exactly one Input layer is required and it must be entry")
    for l in graph.layers:
        for src in l.inputs:
            if src not in by_id:
                raise ModelInvalid(f"layer {l.id!r} consumes unknown layer {src!r}")
    order = topo_order(graph)  # raises CycleDetected

    # every layer on some entry -> exit path
    reach_fwd = {graph.entry}
    for lid in order:
        l = by_id[lid]
        if l.inputs and any(i in reach_fwd for i in l.inputs):
            reach_fwd.add(lid)
    reach_bwd = {graph.exit}
    for lid in reversed(order):
        if lid in reach_bwd:
            reach_bwd.update(by_id[lid].inputs)
    stranded = set(ids) - (reach_fwd & reach_bwd)
    if stranded:
        raise ModelInvalid(f"layers not on an entry->exit path: {sorted(stranded)}")

    for name in graph.weights:
        if not _NAME_RE.match(name):
            raise ModelInvalid(f"bad weight name {name!r}")

    shapes = infer_shapes(graph)
    for l in graph.layers:
        expected = _expected_weight_shapes(l, shapes[l.inputs[0]] if l.inputs else ())
        for ref, want in zip(l.weight_refs, expected):
            if ref not in graph.weights:
                raise MissingWeight(f"layer {l.id!r}: weight {ref!r} not provided")
            got = graph.weights[ref].shape
            if tuple(got) != want:
                raise ShapeMismatch(l.id, f"weight {ref!r} has shape {got}, want {want}")


def forward(layer: LayerSpec, inputs: list[np.ndarray], weights: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate one layer.  Deterministic, float32 throughout."""
    shapes = [tuple(t.shape) for t in inputs]
    out_shape = _infer_one(layer, shapes)
    kind = layer.kind
    if kind == "Input":
        return inputs[0]
    if kind == "ReLU":
        return np.maximum(inputs[0], np.float32(0.0))
    if kind == "Add":
        return inputs[0] + inputs[1]
    if kind == "Flatten":
        return np.ascontiguousarray(inputs[0]).reshape(out_shape)
    if kind == "GlobalAvgPool":
        x = inputs[0]
        # fixed-order accumulation: sum over flattened h*w, then scale
        n, h, w, c = x.shape
        flat = np.ascontiguousarray(x).reshape(n, h * w, c)
        total = np.einsum("nsc->nc", flat, optimize=False)
        return (total / np.float32(h * w)).astype(np.float32)
    if kind in ("Dense", "Conv2D"):
        for ref in layer.weight_refs:
            if ref not in weights:
                raise MissingWeight(f"layer {layer.id!r}: weight {ref!r} not provided")
        kernel = weights[layer.weight_refs[0]]
        bias = weights[layer.weight_refs[1]]
        want = _expected_weight_shapes(layer, shapes[0])
        for ref, w_arr, exp in zip(layer.weight_refs, (kernel, bias), want):
            if tuple(w_arr.shape) != exp:
                raise ShapeMismatch(layer.id, f"weight {ref!r} has shape {w_arr.shape}, want {exp}")
        if kind == "Dense":
            out = np.einsum("nf,fu->nu", inputs[0], kernel, optimize=False)
            return out + bias
        return _conv2d_same(layer, inputs[0], kernel, bias, out_shape)
    if kind == "MaxPool2D":
        return _maxpool2d_same(layer, inputs[0], out_shape)
    raise ModelInvalid(f"unknown kind {kind!r}")


def _same_pad(extent: int, out: int, k: int, stride: int) -> tuple[int, int]:
    total = max((out - 1) * stride + k - extent, 0)
    return total // 2, total - total // 2


def _conv2d_same(layer: LayerSpec, x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                 out_shape: Shape) -> np.ndarray:
    k = int(layer.params["kernel"])
    stride = int(layer.params.get("stride", 1))
    _, h, w, _ = x.shape
    (pt, pb), (pl, pr) = _same_pad(h, out_shape[1], k, stride), _same_pad(w, out_shape[2], k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("nhwckl,klco->nhwo", win, kernel, optimize=False)
    return out + bias


def _maxpool2d_same(layer: LayerSpec, x: np.ndarray, out_shape: Shape) -> np.ndarray:
    k = int(layer.params["pool"])
    stride = int(layer.params.get("stride", k))
    _, h, w, _ = x.shape
    (pt, pb), (pl, pr) = _same_pad(h, out_shape[1], k, stride), _same_pad(w, out_shape[2], k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)),
                constant_values=np.float32(-np.inf))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win.max(axis=(-2, -1)))


def run_model(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Fold ``forward`` over the graph in topological order."""
    x = as_tensor(x)
    infer_shapes(graph, x.shape)  # full shape check before any compute
    values: dict[str, np.ndarray] = {}
    for lid in topo_order(graph):
        layer = graph.layer(lid)
        ins = [x] if layer.kind == "Input" else [values[i] for i in layer.inputs]
        values[lid] = forward(layer, ins, graph.weights)
    return values[graph.exit]


# --- textual architecture form -------------------------------------------

def graph_to_text(graph: ModelGraph) -> str:
    """Canonical JSON rendering of the architecture (weights excluded).

    Layers are listed in topological order; keys are sorted and no
    whitespace is emitted, so equal graphs render byte-identically.
    """
    order = topo_order(graph)
    layers = []
    for lid in order:
        l = graph.layer(lid)
        layers.append(
            {
                "id": l.id,
                "kind": l.kind,
                "params": {k: list(v) if isinstance(v, (tuple, list)) else int(v)
                           for k, v in sorted(l.params.items())},
                "weights": list(l.weight_refs),
                "inputs": list(l.inputs),
            }
        )
    doc = {"entry": graph.entry, "exit": graph.exit, "layers": layers}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def graph_from_text(text: str, weights: dict[str, np.ndarray]) -> ModelGraph:
    """Parse ``graph_to_text`` output back into a ModelGraph."""
    try:
        doc = json.loads(text)
        layers = tuple(
            LayerSpec(
                id=d["id"],
                kind=d["kind"],
                params={k: tuple(v) if isinstance(v, list) else int(v)
                        for k, v in d["params"].items()},
                weight_refs=tuple(d["weights"]),
                inputs=tuple(d["inputs"]),
            )
            for d in doc["layers"]
        )
        entry, exit_ = doc["entry"], doc["exit"]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise ModelInvalid(f"unparseable architecture text: {e}") from e
    return ModelGraph(layers=layers, weights=weights, entry=entry, exit=exit_)


# --- on-disk model format --------------------------------------------------

_WEIGHT_MAGIC_DIR = "weights"


def write_weight_blob(t: np.ndarray) -> bytes:
    """rank:u64le, extents:u64le each, body: float32le row-major."""
    t = as_tensor(t)
    header = struct.pack("<Q", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + t.astype("<f4", copy=False).tobytes(order="C")


def read_weight_blob(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise ModelInvalid("weight blob too short")
    (rank,) = struct.unpack_from("<Q", data, 0)
    if rank < 1 or len(data) < 8 + 8 * rank:
        raise ModelInvalid("weight blob header truncated")
    shape = struct.unpack_from(f"<{rank}Q", data, 8)
    count = math.prod(shape)
    body = data[8 + 8 * rank:]
    if len(body) != 4 * count:
        raise ModelInvalid(f"weight blob body is {len(body)} bytes, want {4 * count}")
    arr = np.frombuffer(body, dtype="<f4").reshape(shape)
    return np.ascontiguousarray(arr.astype(np.float32, copy=False))


def save_model(graph: ModelGraph, path: str | Path) -> None:
    """Write a model directory: ``graph`` text plus one blob per weight."""
    root = Path(path)
    (root / _WEIGHT_MAGIC_DIR).mkdir(parents=True, exist_ok=True)
    (root / "graph").write_text(graph_to_text(graph))
    for name, t in graph.weights.items():
        (root / _WEIGHT_MAGIC_DIR / name).write_bytes(write_weight_blob(t))


def load_model(path: str | Path) -> ModelGraph:
    root = Path(path)
    text = (root / "graph").read_text()
    weights = {}
    wdir = root / _WEIGHT_MAGIC_DIR
    if wdir.is_dir():
        for f in sorted(wdir.iterdir()):
            weights[f.name] = read_weight_blob(f.read_bytes())
    return graph_from_text(text, weights)


def save_tensor(t: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(write_weight_blob(t))


def load_tensor(path: str | Path) -> np.ndarray:
    return read_weight_blob(Path(path).read_bytes())
