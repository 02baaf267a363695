"""Layer-wise splitting of a model graph into sequential sub-networks.

Cuts are restricted to bridge edges (edges every entry-to-exit path
crosses), so exactly one tensor flows over each node boundary.  For a
bridge u->v the producer u has out-degree 1 and the consumer v has
in-degree 1, which makes blocks between bridges contiguous in every
topological order; splitting reduces to slicing the topo order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CutOrderError, DeferError, InvalidCut, Unpartitionable
from .model import LayerSpec, ModelGraph, infer_shapes, run_model, topo_order

Edge = tuple[str, str]


@dataclass(frozen=True)
class CutPoint:
    """A partition boundary: the (producer, consumer) edge it severs."""

    edge: Edge


@dataclass(frozen=True)
class Partition:
    """One contiguous sub-network, ready to ship to a compute node."""

    index: int
    graph: ModelGraph

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return self.graph.weights

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.graph.input_shape()

    def layer_ids(self) -> list[str]:
        """Compute layers only; the synthetic Input is bookkeeping."""
        return [l.id for l in self.graph.layers if l.kind != "Input"]


def edges_of(graph: ModelGraph) -> list[Edge]:
    out: list[Edge] = []
    for l in graph.layers:
        for src in l.inputs:
            out.append((src, l.id))
    return out


def bridges(graph: ModelGraph) -> list[Edge]:
    """All bridge edges, ordered by the producer's topological position.

    An edge is a bridge iff every entry->exit path crosses it, i.e.
    paths(entry->u) * paths(v->exit) == paths(entry->exit).
    """
    order = topo_order(graph)
    by_id = {l.id: l for l in graph.layers}
    from_entry: dict[str, int] = {}
    for lid in order:
        l = by_id[lid]
        from_entry[lid] = 1 if lid == graph.entry else sum(
            from_entry[i] for i in l.inputs)
    consumers: dict[str, list[str]] = {lid: [] for lid in order}
    for l in graph.layers:
        for src in l.inputs:
            consumers[src].append(l.id)
    to_exit: dict[str, int] = {}
    for lid in reversed(order):
        to_exit[lid] = 1 if lid == graph.exit else sum(
            to_exit[c] for c in consumers[lid])
    total = from_entry[graph.exit]
    pos = {lid: i for i, lid in enumerate(order)}
    found = sorted(
        {
            (u, v)
            for (u, v) in edges_of(graph)
            if from_entry[u] * to_exit[v] == total
        },
        key=lambda e: pos[e[0]],
    )
    return found


def _synthetic_input_id(producer: str, taken: set[str]) -> str:
    candidate = f"{producer}::in"
    while candidate in taken:
        candidate += "_"
    return candidate


def partition_model(graph: ModelGraph, cuts: list[CutPoint]) -> list[Partition]:
    """Split ``graph`` at ``cuts`` into len(cuts)+1 sub-networks.

    Cuts must be distinct bridges listed in topological order.  Each
    partition's entry is an Input layer shaped like the tensor crossing
    the cut, so chained execution reproduces the original bit-for-bit.
    """
    bridge_set = set(bridges(graph))
    for c in cuts:
        if tuple(c.edge) not in bridge_set:
            raise InvalidCut(f"edge {c.edge} is not a bridge of the graph")
    order = topo_order(graph)
    pos = {lid: i for i, lid in enumerate(order)}
    producer_pos = [pos[c.edge[0]] for c in cuts]
    if len(set(producer_pos)) != len(cuts):
        raise CutOrderError("cuts must be pairwise distinct")
    if producer_pos != sorted(producer_pos):
        raise CutOrderError("cuts must be listed in topological order")

    shapes = infer_shapes(graph)
    # slice the topo order after each cut producer
    boundaries = [p + 1 for p in producer_pos]
    segments: list[list[str]] = []
    start = 0
    for b in boundaries + [len(order)]:
        segments.append(order[start:b])
        start = b

    partitions: list[Partition] = []
    for idx, segment in enumerate(segments):
        seg_layers: list[LayerSpec] = []
        weights: dict[str, np.ndarray] = {}
        if idx == 0:
            entry_id = graph.entry
        else:
            producer = cuts[idx - 1].edge[0]
            entry_id = _synthetic_input_id(producer, set(segment))
            seg_layers.append(
                LayerSpec(entry_id, "Input", {"shape": tuple(shapes[producer])})
            )
        for lid in segment:
            layer = graph.layer(lid)
            if idx > 0 and cuts[idx - 1].edge[0] in layer.inputs:
                producer = cuts[idx - 1].edge[0]
                rewired = tuple(entry_id if i == producer else i for i in layer.inputs)
                layer = LayerSpec(layer.id, layer.kind, layer.params,
                                  layer.weight_refs, rewired)
            seg_layers.append(layer)
            for ref in layer.weight_refs:
                weights[ref] = graph.weights[ref]
        sub = ModelGraph(tuple(seg_layers), weights, entry_id, segment[-1])
        partitions.append(Partition(index=idx, graph=sub))
    return partitions


def _block_counts(graph: ModelGraph) -> tuple[list[int], list[Edge]]:
    """Layer counts between consecutive usable bridges.

    Edges leaving the Input layer are excluded: cutting there would
    leave a partition with no compute layers.
    """
    order = topo_order(graph)
    usable = [e for e in bridges(graph) if e[0] != graph.entry]
    pos = {lid: i for i, lid in enumerate(order)}
    boundaries = [pos[u] + 1 for (u, _) in usable]
    counts = []
    start = 0
    for b in boundaries + [len(order)]:
        counts.append(sum(1 for lid in order[start:b]
                          if graph.layer(lid).kind != "Input"))
        start = b
    return counts, usable


def auto_cuts(graph: ModelGraph, k: int) -> list[CutPoint]:
    """Choose k-1 bridge cuts balancing partition layer counts.

    Minimizes the maximum absolute deviation of the counts from the
    mean; on ties the remainder goes to the earliest partitions.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return []
    counts, usable = _block_counts(graph)
    if len(usable) < k - 1:
        raise Unpartitionable(
            f"need {k - 1} cut points but only {len(usable)} usable bridges exist")
    n_blocks = len(counts)
    total = sum(counts)
    mean = total / k
    suffix = [0] * (n_blocks + 1)
    for i in range(n_blocks - 1, -1, -1):
        suffix[i] = suffix[i + 1] + counts[i]

    INF = float("inf")
    # best[j][i]: minimal achievable max deviation splitting blocks i.. into j parts
    best = [[INF] * (n_blocks + 1) for _ in range(k + 1)]
    for i in range(n_blocks):
        best[1][i] = abs(suffix[i] - mean)
    for j in range(2, k + 1):
        for i in range(n_blocks - j, -1, -1):
            acc = 0
            b = INF
            for t in range(i, n_blocks - j + 1):
                acc += counts[t]
                cand = max(abs(acc - mean), best[j - 1][t + 1])
                if cand < b:
                    b = cand
            best[j][i] = b

    target = best[k][0]
    # greedy: largest feasible first part at every step gives the
    # lexicographically greatest size vector among optimal splits
    eps = 1e-9
    cut_indices: list[int] = []
    i = 0
    for j in range(k, 1, -1):
        acc = 0
        chosen = None
        for t in range(i, n_blocks - j + 1):
            acc += counts[t]
            if abs(acc - mean) <= target + eps and best[j - 1][t + 1] <= target + eps:
                chosen = t
        assert chosen is not None, "DP and reconstruction disagree"
        cut_indices.append(chosen)
        i = chosen + 1
    return [CutPoint(usable[t]) for t in cut_indices]


def validate_chain(original: ModelGraph, partitions: list[Partition],
                   probe: np.ndarray) -> bool:
    """True iff folding the partitions over ``probe`` is bit-identical
    to running the original model."""
    try:
        want = run_model(original, probe)
        x = probe
        for p in sorted(partitions, key=lambda p: p.index):
            x = run_model(p.graph, x)
    except DeferError:
        return False
    return x.shape == want.shape and x.tobytes() == want.tobytes()


def partition_summary(partitions: list[Partition]) -> list[dict]:
    """Per-partition digest used by the inspect command and the service."""
    rows = []
    for p in partitions:
        rows.append(
            {
                "index": p.index,
                "layers": p.layer_ids(),
                "layer_count": len(p.layer_ids()),
                "weight_bytes": p.graph.weight_bytes(),
                "input_shape": list(p.input_shape),
                "output_shape": list(infer_shapes(p.graph)[p.graph.exit]),
            }
        )
    return rows
