"""Deterministic assembly of chromosomes into concrete layer DAGs.

A blueprint node is replaced by a copy of the module its species pointer
selected; the module's boundary nodes become identity junctions spliced to the
blueprint edges. Any layer with several parents gets a merge layer, and
parents whose output sizes disagree are first downsampled to the smallest
parent size using the policy's domain-dependent method. The result is a sized
DAG with a single input and a single output, exportable as DOT or canonical
JSON.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .genome import (
    BOUNDARY_KIND,
    LINK_LAYER,
    LINK_SKIP,
    ROLE_INPUT,
    ROLE_OUTPUT,
    BlueprintChromosome,
    ModuleChromosome,
    canonical_json,
)

MERGE_CONCAT = "concatenate"
MERGE_SUM = "element_wise_sum"
DOWNSAMPLE_POOL = "max_pool"
DOWNSAMPLE_BOTTLENECK = "dense_bottleneck"

# Layer kinds that transform activations; junction machinery is excluded from
# depth and from the trainable-parameter count.
REAL_KINDS = frozenset({"dense", "conv", "lstm"})

Shape = tuple[int, ...]


class AssemblyError(ValueError):
    """Assembly could not produce a valid sized network."""

    def __init__(self, message: str, layer_ids: tuple[str, ...] = ()):
        super().__init__(message)
        self.layer_ids = layer_ids


@dataclass(frozen=True)
class MergePolicy:
    method: str = MERGE_CONCAT
    downsample: str = DOWNSAMPLE_POOL

    def __post_init__(self) -> None:
        if self.method not in (MERGE_CONCAT, MERGE_SUM):
            raise ValueError(f"unknown merge method {self.method!r}")
        if self.downsample not in (DOWNSAMPLE_POOL, DOWNSAMPLE_BOTTLENECK):
            raise ValueError(f"unknown downsample method {self.downsample!r}")


@dataclass(frozen=True)
class ConcreteLayer:
    id: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    output_size: Shape | None = None


@dataclass
class AssembledNetwork:
    layers: list[ConcreteLayer]              # stored in topological order
    edges: list[tuple[str, str]]
    recurrent_edges: list[tuple[str, str]] = field(default_factory=list)
    globals: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] | None = None

    def layer(self, layer_id: str) -> ConcreteLayer:
        return next(l for l in self.layers if l.id == layer_id)

    def parents(self, layer_id: str) -> list[str]:
        return [s for s, d in self.edges if d == layer_id]

    def children(self, layer_id: str) -> list[str]:
        return [d for s, d in self.edges if s == layer_id]


# ---------------------------------------------------------------------------
# Size rules
# ---------------------------------------------------------------------------

def _total(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def _layer_output_size(layer: ConcreteLayer, parent_sizes: list[Shape],
                       input_size: Shape) -> Shape:
    kind = layer.kind
    if kind == "input":
        return tuple(input_size)
    if kind in ("identity", "output"):
        return parent_sizes[0]
    if kind == "dense":
        return (int(layer.params.get("size", 32)),)
    if kind == "lstm":
        return (int(layer.params.get("hidden_size", 32)),)
    if kind == "conv":
        parent = parent_sizes[0]
        if len(parent) != 3:
            raise AssemblyError(f"conv layer {layer.id} needs a (channels, h, w) input, got {parent}",
                                (layer.id,))
        channels = int(layer.params.get("filters", 32))
        _, h, w = parent
        if layer.params.get("max_pooling", False):
            h, w = max(1, h // 2), max(1, w // 2)
        return (channels, h, w)
    if kind == "max_pool":
        parent = parent_sizes[0]
        halvings = int(layer.params["halvings"])
        pooled = list(parent)
        for axis in range(1, len(pooled)) if len(pooled) == 3 else range(len(pooled)):
            for _ in range(halvings):
                pooled[axis] = max(1, pooled[axis] // 2)
        return tuple(pooled)
    if kind == "bottleneck":
        return tuple(layer.params["size"])
    if kind == "merge":
        return _merge_output_size(layer, parent_sizes)
    raise AssemblyError(f"unknown layer kind {kind!r}", (layer.id,))


def _merge_output_size(layer: ConcreteLayer, parent_sizes: list[Shape]) -> Shape:
    method = layer.params["method"]
    first = parent_sizes[0]
    if method == MERGE_SUM:
        if any(s != first for s in parent_sizes):
            raise AssemblyError(f"sum merge {layer.id} got unequal parent sizes {parent_sizes}",
                                (layer.id,))
        return first
    if all(len(s) == 1 for s in parent_sizes):
        return (sum(s[0] for s in parent_sizes),)
    if all(len(s) == 3 for s in parent_sizes):
        if any(s[1:] != first[1:] for s in parent_sizes):
            raise AssemblyError(
                f"concatenate merge {layer.id} got unequal spatial sizes {parent_sizes}",
                (layer.id,))
        return (sum(s[0] for s in parent_sizes), first[1], first[2])
    raise AssemblyError(f"merge {layer.id} got mixed-rank parents {parent_sizes}", (layer.id,))


def _smallest(sizes: Iterable[Shape]) -> Shape:
    return min(sizes, key=lambda s: (_total(s), s))


def _pool_halvings(parent: Shape, target: Shape) -> int:
    """Halvings needed to bring the pooled axes of ``parent`` down to (at
    most) the target's. Spatial axes for rank-3 shapes, every axis for rank-1."""
    axes = range(1, 3) if len(parent) == 3 else range(len(parent))
    halvings = 0
    current = list(parent)
    while any(current[a] > target[a] if a < len(target) else False for a in axes):
        for a in axes:
            current[a] = max(1, current[a] // 2)
        halvings += 1
        if halvings > 32:
            break
    return halvings


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------

def _topo_order(ids: list[str], edges: list[tuple[str, str]]) -> list[str]:
    indegree = {i: 0 for i in ids}
    children: dict[str, list[str]] = {i: [] for i in ids}
    for s, d in edges:
        indegree[d] += 1
        children[s].append(d)
    ready = sorted(i for i in ids if indegree[i] == 0)
    order: list[str] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for child in children[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
    if len(order) != len(ids):
        raise AssemblyError("assembled graph contains a cycle")
    return order


def _instantiate_module(module: ModuleChromosome, prefix: str,
                        layers: dict[str, ConcreteLayer],
                        edges: list[tuple[str, str]],
                        recurrent: list[tuple[str, str]]) -> tuple[str, str]:
    """Copy a module's enabled subgraph under ``prefix``; returns the ids of
    its entry and exit junction layers."""
    live = {n.innovation: n for n in module.nodes if n.enabled}
    entry = exit_ = None
    for innov, gene in sorted(live.items()):
        lid = f"{prefix}n{innov}"
        if gene.role in (ROLE_INPUT, ROLE_OUTPUT):
            layers[lid] = ConcreteLayer(lid, BOUNDARY_KIND)
            if gene.role == ROLE_INPUT:
                entry = lid
            else:
                exit_ = lid
        else:
            layers[lid] = ConcreteLayer(lid, gene.layer_kind, dict(gene.params.values))
    for e in module.edges:
        if not e.enabled or e.src not in live or e.dst not in live:
            continue
        pair = (f"{prefix}n{e.src}", f"{prefix}n{e.dst}")
        if e.link_kind == LINK_SKIP:
            recurrent.append(pair)
        else:
            edges.append(pair)
    return entry, exit_


def _insert_merges(layers: dict[str, ConcreteLayer], edges: list[tuple[str, str]],
                   policy: MergePolicy, input_size: Shape) -> tuple[list[ConcreteLayer], list[tuple[str, str]]]:
    """Topological sweep: compute sizes, inserting merge and downsample layers
    in front of every multi-parent node. Returns sized layers in topological
    order plus the rewritten edge list."""
    order = _topo_order(list(layers), edges)
    sizes: dict[str, Shape] = {}
    out_layers: list[ConcreteLayer] = []
    edge_set = list(edges)

    def parent_list(lid: str) -> list[str]:
        return [s for s, d in edge_set if d == lid]

    for lid in order:
        layer = layers[lid]
        parents = parent_list(lid)
        if len(parents) > 1:
            feeds = []
            target = _smallest([sizes[p] for p in parents])
            for p in parents:
                feed, psize = p, sizes[p]
                if psize != target:
                    if policy.downsample == DOWNSAMPLE_POOL:
                        halvings = _pool_halvings(psize, target)
                        if halvings:
                            ds = ConcreteLayer(f"{p}>{lid}.pool", "max_pool", {"halvings": halvings})
                            edge_set.append((feed, ds.id))
                            sizes[ds.id] = _layer_output_size(ds, [psize], input_size)
                            out_layers.append(replace(ds, output_size=sizes[ds.id]))
                            feed, psize = ds.id, sizes[ds.id]
                    else:
                        ds = ConcreteLayer(f"{p}>{lid}.bottleneck", "bottleneck",
                                           {"size": list(target)})
                        edge_set.append((feed, ds.id))
                        sizes[ds.id] = target
                        out_layers.append(replace(ds, output_size=target))
                        feed, psize = ds.id, target
                if policy.method == MERGE_SUM and psize != target:
                    # Pooling landed off target; a bottleneck enforces equality.
                    ds = ConcreteLayer(f"{feed}>{lid}.bottleneck", "bottleneck",
                                       {"size": list(target)})
                    edge_set.append((feed, ds.id))
                    sizes[ds.id] = target
                    out_layers.append(replace(ds, output_size=target))
                    feed = ds.id
                feeds.append(feed)
            merge = ConcreteLayer(f"{lid}.merge", "merge", {"method": policy.method})
            sizes[merge.id] = _merge_output_size(
                replace(merge, params=merge.params), [sizes[f] for f in feeds])
            out_layers.append(replace(merge, output_size=sizes[merge.id]))
            edge_set = [(s, d) for s, d in edge_set if not (d == lid and s in parents)]
            edge_set.extend((f, merge.id) for f in feeds)
            edge_set.append((merge.id, lid))
            parents = [merge.id]
        parent_sizes = [sizes[p] for p in parents]
        sizes[lid] = _layer_output_size(layer, parent_sizes, input_size)
        out_layers.append(replace(layer, output_size=sizes[lid]))

    by_id = {l.id: l for l in out_layers}
    ordered = [by_id[i] for i in _topo_order(list(by_id), edge_set)]
    return ordered, edge_set


def _finish(layers: dict[str, ConcreteLayer], edges: list[tuple[str, str]],
            recurrent: list[tuple[str, str]], entry: str, exit_: str,
            globals_values: dict[str, Any], policy: MergePolicy, input_size: Shape,
            provenance: dict[str, Any] | None) -> AssembledNetwork:
    layers[entry] = replace(layers[entry], kind="input")
    layers[exit_] = replace(layers[exit_], kind="output")
    sized, final_edges = _insert_merges(layers, edges, policy, tuple(input_size))
    net = AssembledNetwork(layers=sized, edges=sorted(final_edges),
                           recurrent_edges=sorted(recurrent),
                           globals=dict(globals_values), provenance=provenance)
    check_network(net, tuple(input_size))
    return net


def assemble(blueprint: BlueprintChromosome, modules: dict[int, ModuleChromosome],
             policy: MergePolicy, input_size: Shape,
             provenance: dict[str, Any] | None = None) -> AssembledNetwork:
    """Substitute the chosen module into every enabled blueprint node and wire
    the copies along the blueprint edges. Blueprint nodes pointing at one
    species receive copies of the identical module."""
    live = {n.innovation: n for n in blueprint.nodes if n.enabled}
    missing = sorted({n.species_pointer for n in live.values()} - set(modules))
    if missing:
        raise AssemblyError(f"no module chosen for species {missing}")

    layers: dict[str, ConcreteLayer] = {}
    edges: list[tuple[str, str]] = []
    recurrent: list[tuple[str, str]] = []
    bounds: dict[int, tuple[str, str]] = {}
    for innov, node in sorted(live.items()):
        bounds[innov] = _instantiate_module(modules[node.species_pointer], f"b{innov}.",
                                            layers, edges, recurrent)
    for e in blueprint.edges:
        if e.enabled and e.src in live and e.dst in live:
            edges.append((bounds[e.src][1], bounds[e.dst][0]))

    input_node = next(n for n in blueprint.nodes if n.role == ROLE_INPUT)
    output_node = next(n for n in blueprint.nodes if n.role == ROLE_OUTPUT)
    return _finish(layers, edges, recurrent, bounds[input_node.innovation][0],
                   bounds[output_node.innovation][1], blueprint.globals.values,
                   policy, input_size, provenance)


def assemble_chromosome(module: ModuleChromosome, policy: MergePolicy, input_size: Shape,
                        provenance: dict[str, Any] | None = None) -> AssembledNetwork:
    """Assemble a lone chromosome: its boundary nodes become the network input
    and output layers directly."""
    layers: dict[str, ConcreteLayer] = {}
    edges: list[tuple[str, str]] = []
    recurrent: list[tuple[str, str]] = []
    entry, exit_ = _instantiate_module(module, "", layers, edges, recurrent)
    return _finish(layers, edges, recurrent, entry, exit_, module.globals.values,
                   policy, input_size, provenance)


# ---------------------------------------------------------------------------
# Validation and inspection
# ---------------------------------------------------------------------------

def infer_sizes(net: AssembledNetwork, input_size: Shape) -> AssembledNetwork:
    """Recompute every output size by topological sweep. The result does not
    depend on which valid topological order is used, since each layer's size is
    a function of its parents' sizes only."""
    ids = [l.id for l in net.layers]
    order = _topo_order(ids, net.edges)
    by_id = {l.id: l for l in net.layers}
    sizes: dict[str, Shape] = {}
    for lid in order:
        parents = [s for s, d in net.edges if d == lid]
        sizes[lid] = _layer_output_size(by_id[lid], [sizes[p] for p in parents], input_size)
    return AssembledNetwork(
        layers=[replace(l, output_size=sizes[l.id]) for l in net.layers],
        edges=list(net.edges), recurrent_edges=list(net.recurrent_edges),
        globals=dict(net.globals), provenance=net.provenance)


def check_network(net: AssembledNetwork, input_size: Shape | None = None) -> None:
    """Structural validation: DAG, single input and output, every layer on an
    input-to-output path, merges interposed wherever a layer has several
    parents, and stored sizes consistent with a fresh sweep."""
    ids = [l.id for l in net.layers]
    if len(set(ids)) != len(ids):
        raise AssemblyError("duplicate layer ids")
    _topo_order(ids, net.edges)  # raises on cycles
    inputs = [l.id for l in net.layers if l.kind == "input"]
    outputs = [l.id for l in net.layers if l.kind == "output"]
    if len(inputs) != 1 or len(outputs) != 1:
        raise AssemblyError(f"need exactly one input and one output layer, got {inputs}/{outputs}")
    known = set(ids)
    for s, d in net.edges + net.recurrent_edges:
        if s not in known or d not in known:
            raise AssemblyError(f"edge ({s}, {d}) references a missing layer")

    fwd: dict[str, list[str]] = {}
    back: dict[str, list[str]] = {}
    for s, d in net.edges:
        fwd.setdefault(s, []).append(d)
        back.setdefault(d, []).append(s)

    def reach(start: str, adjacency: dict[str, list[str]]) -> set[str]:
        seen, stack = {start}, [start]
        while stack:
            for nxt in adjacency.get(stack.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    on_path = reach(inputs[0], fwd) & reach(outputs[0], back)
    stranded = sorted(set(ids) - on_path)
    if stranded:
        raise AssemblyError(f"layers off every input-to-output path: {stranded}",
                            tuple(stranded))
    for layer in net.layers:
        if layer.kind != "merge" and len(net.parents(layer.id)) > 1:
            raise AssemblyError(f"layer {layer.id} has several parents but is not a merge",
                                (layer.id,))
    if input_size is not None:
        resized = infer_sizes(net, input_size)
        for old, new in zip(net.layers, resized.layers):
            if old.output_size is not None and tuple(old.output_size) != tuple(new.output_size):
                raise AssemblyError(
                    f"stored size {old.output_size} of {old.id} disagrees with inferred {new.output_size}",
                    (old.id,))


def network_depth(net: AssembledNetwork) -> int:
    """Largest number of real (dense/conv/lstm) layers along any
    input-to-output path."""
    order = _topo_order([l.id for l in net.layers], net.edges)
    kind = {l.id: l.kind for l in net.layers}
    depth: dict[str, int] = {}
    for lid in order:
        parents = [s for s, d in net.edges if d == lid]
        base = max((depth[p] for p in parents), default=0)
        depth[lid] = base + (1 if kind[lid] in REAL_KINDS else 0)
    sink = next(l.id for l in net.layers if l.kind == "output")
    return depth[sink]


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

def network_to_dict(net: AssembledNetwork) -> dict[str, Any]:
    return {
        "layers": [
            {"id": l.id, "kind": l.kind, "params": l.params,
             "output_size": list(l.output_size) if l.output_size is not None else None}
            for l in net.layers
        ],
        "edges": [list(e) for e in net.edges],
        "recurrent_edges": [list(e) for e in net.recurrent_edges],
        "globals": net.globals,
        "provenance": net.provenance,
    }


def network_from_dict(d: dict[str, Any]) -> AssembledNetwork:
    return AssembledNetwork(
        layers=[
            ConcreteLayer(l["id"], l["kind"], dict(l["params"]),
                          tuple(l["output_size"]) if l["output_size"] is not None else None)
            for l in d["layers"]
        ],
        edges=[tuple(e) for e in d["edges"]],
        recurrent_edges=[tuple(e) for e in d["recurrent_edges"]],
        globals=dict(d["globals"]),
        provenance=d.get("provenance"),
    )


def to_dot(net: AssembledNetwork) -> str:
    lines = ["digraph network {", "  rankdir=TB;"]
    for layer in net.layers:
        size = "x".join(str(d) for d in layer.output_size) if layer.output_size else "?"
        lines.append(f'  "{layer.id}" [label="{layer.kind}\\n{size}"];')
    for s, d in net.edges:
        lines.append(f'  "{s}" -> "{d}";')
    for s, d in net.recurrent_edges:
        lines.append(f'  "{s}" -> "{d}" [style=dashed];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_network(net: AssembledNetwork, fmt: str) -> bytes:
    """Serialize as Graphviz DOT or canonical JSON. The JSON form round-trips
    through ``import_network`` byte-exactly."""
    if fmt == "dot":
        return to_dot(net).encode()
    if fmt == "json":
        return (canonical_json(network_to_dict(net)) + "\n").encode()
    raise ValueError(f"unknown export format {fmt!r}")


def import_network(data: bytes) -> AssembledNetwork:
    return network_from_dict(json.loads(data.decode()))


def network_hash(net: AssembledNetwork) -> str:
    return hashlib.sha1(export_network(net, "json")).hexdigest()[:16]
