"""Directed-graph chromosomes and the genetic operators on them.

Two chromosome kinds share one graph grammar: module chromosomes, whose nodes
are layer genes with hyperparameter tables, and blueprint chromosomes, whose
nodes point at module species. Every structural event (a new edge between an
endpoint pair, a node splitting an edge) receives a historical marking from an
``InnovationRegistry``; markings line genes up during crossover and distance
computation.

Chromosomes are immutable values: every operator returns a new chromosome.
The registry is the only mutable object and serializes its own access.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

from .hyperparams import (
    HyperparameterSpace,
    HyperparameterTable,
    crossover_tables,
    mutate_table,
    sample_table,
    table_distance,
)

ROLE_INPUT = "input"
ROLE_HIDDEN = "hidden"
ROLE_OUTPUT = "output"

LINK_LAYER = "layer"
LINK_SKIP = "cell_skip"

LSTM_KIND = "lstm"
# Boundary nodes are splice points, not evolved layers; assembly turns them
# into identity junctions (or the network input/output at the graph ends).
BOUNDARY_KIND = "identity"

# Every initial chromosome is the same minimal chain and shares these ids;
# registries issue fresh ids from FIRST_FRESH_ID up.
MINIMAL_INPUT_ID = 0
MINIMAL_HIDDEN_ID = 1
MINIMAL_OUTPUT_ID = 2
MINIMAL_EDGE_IN_ID = 3
MINIMAL_EDGE_OUT_ID = 4
FIRST_FRESH_ID = 5

DEFAULT_COMPAT_COEFFS = (1.0, 1.0, 0.4)


class ChromosomeKindError(TypeError):
    """Operands are not the same chromosome kind."""


class InvalidChromosomeError(ValueError):
    """A chromosome violates its graph invariants."""


class InnovationRegistry:
    """Issues historical markings for structural events.

    The same event within one generation receives the same id; distinct events
    never collide. The event cache resets at every generation boundary, the
    counter never does. All issuance is lock-serialized so mutation may run
    concurrently across individuals.
    """

    def __init__(self, next_id: int = FIRST_FRESH_ID):
        self._lock = threading.Lock()
        self._next_id = next_id
        self._edge_events: dict[tuple[int, int, str], int] = {}
        self._split_events: dict[int, tuple[int, int, int]] = {}

    def begin_generation(self) -> None:
        with self._lock:
            self._edge_events.clear()
            self._split_events.clear()

    def edge_id(self, src: int, dst: int, link_kind: str = LINK_LAYER) -> int:
        key = (src, dst, link_kind)
        with self._lock:
            if key not in self._edge_events:
                self._edge_events[key] = self._next_id
                self._next_id += 1
            return self._edge_events[key]

    def split_ids(self, edge_innovation: int,
                  forbidden: frozenset[int] = frozenset()) -> tuple[int, int, int]:
        """Ids for splitting an edge: (new node, in-edge, out-edge).

        ``forbidden`` holds ids already present in the chromosome being
        mutated; if the cached event collides (the same edge was split, crossed
        back in, re-enabled, and split again within one generation) fresh
        uncached ids are issued instead.
        """
        with self._lock:
            ids = self._split_events.get(edge_innovation)
            if ids is None:
                ids = (self._next_id, self._next_id + 1, self._next_id + 2)
                self._next_id += 3
                self._split_events[edge_innovation] = ids
            if forbidden and any(i in forbidden for i in ids):
                ids = (self._next_id, self._next_id + 1, self._next_id + 2)
                self._next_id += 3
            return ids

    @property
    def next_id(self) -> int:
        with self._lock:
            return self._next_id

    def to_state(self) -> dict[str, Any]:
        with self._lock:
            return {"next_id": self._next_id}

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "InnovationRegistry":
        return cls(next_id=int(state["next_id"]))


@dataclass(frozen=True)
class LayerGene:
    """One layer of a module chromosome. ``enabled`` is derived bookkeeping:
    a hidden gene is enabled exactly when it lies on some enabled
    input-to-output path (input/output genes are always enabled)."""

    innovation: int
    role: str
    layer_kind: str
    params: HyperparameterTable
    enabled: bool = True


@dataclass(frozen=True)
class BlueprintNode:
    innovation: int
    role: str
    species_pointer: int
    enabled: bool = True


@dataclass(frozen=True)
class ConnectionGene:
    innovation: int
    src: int
    dst: int
    enabled: bool = True
    link_kind: str = LINK_LAYER


@dataclass(frozen=True)
class ModuleChromosome:
    nodes: tuple[LayerGene, ...]
    edges: tuple[ConnectionGene, ...]
    globals: HyperparameterTable


@dataclass(frozen=True)
class BlueprintChromosome:
    nodes: tuple[BlueprintNode, ...]
    edges: tuple[ConnectionGene, ...]
    globals: HyperparameterTable


Chromosome = ModuleChromosome | BlueprintChromosome


def is_blueprint(c: Chromosome) -> bool:
    return isinstance(c, BlueprintChromosome)


# ---------------------------------------------------------------------------
# Graph helpers. All operate on the enabled layer-link subgraph; cell_skip
# edges model recurrent feedback and are exempt from acyclicity and paths.
# ---------------------------------------------------------------------------

def _layer_edges(edges: Iterable[ConnectionGene], enabled_only: bool = True):
    return [e for e in edges if e.link_kind == LINK_LAYER and (e.enabled or not enabled_only)]


def _role_id(nodes: Sequence[Any], role: str) -> int:
    found = [n.innovation for n in nodes if n.role == role]
    if len(found) != 1:
        raise InvalidChromosomeError(f"expected exactly one {role} node, found {len(found)}")
    return found[0]


def _reachable(start: int, adjacency: dict[int, list[int]]) -> set[int]:
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adjacency.get(stack.pop(), ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _path_nodes(nodes: Sequence[Any], edges: Sequence[ConnectionGene]) -> set[int]:
    """Node ids lying on some input-to-output path over enabled layer edges."""
    fwd: dict[int, list[int]] = {}
    back: dict[int, list[int]] = {}
    for e in _layer_edges(edges):
        fwd.setdefault(e.src, []).append(e.dst)
        back.setdefault(e.dst, []).append(e.src)
    src = _role_id(nodes, ROLE_INPUT)
    dst = _role_id(nodes, ROLE_OUTPUT)
    return _reachable(src, fwd) & _reachable(dst, back)


def _has_cycle(edges: Sequence[ConnectionGene]) -> bool:
    adjacency: dict[int, list[int]] = {}
    for e in _layer_edges(edges):
        adjacency.setdefault(e.src, []).append(e.dst)
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[int, int] = {}

    def visit(u: int) -> bool:
        color[u] = GRAY
        for v in adjacency.get(u, ()):
            state = color.get(v, WHITE)
            if state == GRAY:
                return True
            if state == WHITE and visit(v):
                return True
        color[u] = BLACK
        return False

    return any(color.get(u, WHITE) == WHITE and visit(u) for u in list(adjacency))


def _find_cycle_edges(edges: Sequence[ConnectionGene]) -> list[ConnectionGene]:
    """Edges of one cycle in the enabled layer subgraph, or [] if acyclic."""
    enabled = _layer_edges(edges)
    adjacency: dict[int, list[ConnectionGene]] = {}
    for e in enabled:
        adjacency.setdefault(e.src, []).append(e)
    color: dict[int, int] = {}
    trail: list[ConnectionGene] = []

    def visit(u: int) -> list[ConnectionGene] | None:
        color[u] = 1
        for e in adjacency.get(u, ()):
            state = color.get(e.dst, 0)
            if state == 1:
                loop = [e]
                for back in reversed(trail):
                    loop.append(back)
                    if back.src == e.dst:
                        break
                return loop
            if state == 0:
                trail.append(e)
                found = visit(e.dst)
                trail.pop()
                if found:
                    return found
        color[u] = 2
        return None

    for u in list(adjacency):
        if color.get(u, 0) == 0:
            found = visit(u)
            if found:
                return found
    return []


def _sorted_genes(nodes: Iterable[Any], edges: Iterable[ConnectionGene]):
    # Canonical in-memory order: sorted by innovation id. Keeps serialization,
    # rng-driven choices, and checkpoint resume all on the same ordering.
    return (tuple(sorted(nodes, key=lambda g: g.innovation)),
            tuple(sorted(edges, key=lambda g: g.innovation)))


def _normalize(kind_ctor, nodes, edges, globals_table) -> Chromosome:
    """Build a chromosome with derived node-enabled flags and canonical order."""
    nodes, edges = _sorted_genes(nodes, edges)
    on_path = _path_nodes(nodes, edges)
    fixed = []
    for n in nodes:
        want = True if n.role != ROLE_HIDDEN else (n.innovation in on_path)
        fixed.append(n if n.enabled == want else replace(n, enabled=want))
    return kind_ctor(nodes=tuple(fixed), edges=edges, globals=globals_table)


def make_module(nodes, edges, globals_table) -> ModuleChromosome:
    return _normalize(ModuleChromosome, nodes, edges, globals_table)


def make_blueprint(nodes, edges, globals_table) -> BlueprintChromosome:
    return _normalize(BlueprintChromosome, nodes, edges, globals_table)


def _rebuild(c: Chromosome, nodes, edges, globals_table=None) -> Chromosome:
    ctor = make_blueprint if is_blueprint(c) else make_module
    return ctor(nodes, edges, c.globals if globals_table is None else globals_table)


def enabled_nodes(c: Chromosome) -> list[Any]:
    return [n for n in c.nodes if n.enabled]


def check_chromosome(c: Chromosome) -> None:
    """Raise InvalidChromosomeError unless every graph invariant holds.

    Shared by module and blueprint chromosomes: unique innovations, one input
    and one output, valid endpoints, no self-loops, no duplicate enabled edges,
    an acyclic enabled layer subgraph, and every enabled node on some enabled
    input-to-output path. Module-only: cell_skip edges connect two lstm genes.
    """
    ids = [g.innovation for g in c.nodes] + [g.innovation for g in c.edges]
    if len(set(ids)) != len(ids):
        raise InvalidChromosomeError("duplicate innovation ids")
    src = _role_id(c.nodes, ROLE_INPUT)
    dst = _role_id(c.nodes, ROLE_OUTPUT)
    by_id = {n.innovation: n for n in c.nodes}
    for n in c.nodes:
        if n.role != ROLE_HIDDEN and not n.enabled:
            raise InvalidChromosomeError(f"{n.role} gene {n.innovation} is disabled")
    seen_enabled: set[tuple[int, int, str]] = set()
    for e in c.edges:
        if e.src not in by_id or e.dst not in by_id:
            raise InvalidChromosomeError(f"edge {e.innovation} has a missing endpoint")
        if e.src == e.dst:
            raise InvalidChromosomeError(f"edge {e.innovation} is a self-loop")
        if e.enabled:
            key = (e.src, e.dst, e.link_kind)
            if key in seen_enabled:
                raise InvalidChromosomeError(f"duplicate enabled edge {key}")
            seen_enabled.add(key)
        if e.link_kind == LINK_SKIP:
            if is_blueprint(c):
                raise InvalidChromosomeError("blueprints cannot carry cell_skip edges")
            for end in (e.src, e.dst):
                if by_id[end].layer_kind != LSTM_KIND:
                    raise InvalidChromosomeError(f"cell_skip edge {e.innovation} touches non-lstm node {end}")
    if _has_cycle(c.edges):
        raise InvalidChromosomeError("enabled layer subgraph has a cycle")
    on_path = _path_nodes(c.nodes, c.edges)
    if src not in on_path or dst not in on_path:
        raise InvalidChromosomeError("no enabled input-to-output path")
    for n in c.nodes:
        if n.enabled and n.innovation not in on_path:
            raise InvalidChromosomeError(f"enabled node {n.innovation} lies on no input-to-output path")


# ---------------------------------------------------------------------------
# Construction and structural mutation
# ---------------------------------------------------------------------------

def minimal_chromosome(space: HyperparameterSpace, rng: random.Random) -> ModuleChromosome:
    """Minimal-complexity module: input, one hidden layer, output, in a chain."""
    nodes = [
        LayerGene(MINIMAL_INPUT_ID, ROLE_INPUT, BOUNDARY_KIND, sample_table(space.node_params, rng)),
        LayerGene(MINIMAL_HIDDEN_ID, ROLE_HIDDEN, rng.choice(space.layer_kinds),
                  sample_table(space.node_params, rng)),
        LayerGene(MINIMAL_OUTPUT_ID, ROLE_OUTPUT, BOUNDARY_KIND, sample_table(space.node_params, rng)),
    ]
    edges = [
        ConnectionGene(MINIMAL_EDGE_IN_ID, MINIMAL_INPUT_ID, MINIMAL_HIDDEN_ID),
        ConnectionGene(MINIMAL_EDGE_OUT_ID, MINIMAL_HIDDEN_ID, MINIMAL_OUTPUT_ID),
    ]
    return make_module(nodes, edges, sample_table(space.global_params, rng))


def minimal_blueprint(space: HyperparameterSpace, species_ids: Sequence[int],
                      rng: random.Random) -> BlueprintChromosome:
    """Minimal blueprint: a three-node chain of module-species pointers."""
    if not species_ids:
        raise ValueError("cannot build a blueprint without live module species")
    nodes = [
        BlueprintNode(MINIMAL_INPUT_ID, ROLE_INPUT, rng.choice(list(species_ids))),
        BlueprintNode(MINIMAL_HIDDEN_ID, ROLE_HIDDEN, rng.choice(list(species_ids))),
        BlueprintNode(MINIMAL_OUTPUT_ID, ROLE_OUTPUT, rng.choice(list(species_ids))),
    ]
    edges = [
        ConnectionGene(MINIMAL_EDGE_IN_ID, MINIMAL_INPUT_ID, MINIMAL_HIDDEN_ID),
        ConnectionGene(MINIMAL_EDGE_OUT_ID, MINIMAL_HIDDEN_ID, MINIMAL_OUTPUT_ID),
    ]
    return make_blueprint(nodes, edges, sample_table(space.global_params, rng))


def _new_hidden_node(c: Chromosome, innovation: int, rng: random.Random,
                     space: HyperparameterSpace | None,
                     species_ids: Sequence[int] | None):
    if is_blueprint(c):
        if not species_ids:
            raise ValueError("blueprint node mutation needs live module species ids")
        return BlueprintNode(innovation, ROLE_HIDDEN, rng.choice(list(species_ids)))
    if space is None:
        raise ValueError("module node mutation needs the hyperparameter space")
    return LayerGene(innovation, ROLE_HIDDEN, rng.choice(space.layer_kinds),
                     sample_table(space.node_params, rng))


def mutate_add_node(c: Chromosome, registry: InnovationRegistry, rng: random.Random,
                    *, space: HyperparameterSpace | None = None,
                    species_ids: Sequence[int] | None = None) -> tuple[Chromosome, bool]:
    """Split one enabled edge: disable it and route through a fresh hidden node.

    Returns ``(chromosome, changed)``; a chromosome without enabled layer edges
    comes back unchanged with ``changed`` False.
    """
    candidates = _layer_edges(c.edges)
    if not candidates:
        return c, False
    target = rng.choice(candidates)
    used = frozenset(g.innovation for g in c.nodes) | frozenset(g.innovation for g in c.edges)
    node_id, in_id, out_id = registry.split_ids(target.innovation, forbidden=used)
    node = _new_hidden_node(c, node_id, rng, space, species_ids)
    edges = [replace(e, enabled=False) if e.innovation == target.innovation else e for e in c.edges]
    edges.append(ConnectionGene(in_id, target.src, node_id))
    edges.append(ConnectionGene(out_id, node_id, target.dst))
    return _rebuild(c, list(c.nodes) + [node], edges), True


def mutate_add_edge(c: Chromosome, registry: InnovationRegistry,
                    rng: random.Random) -> tuple[Chromosome, bool]:
    """Add one enabled layer edge between enabled nodes without creating a
    cycle or duplicating an existing gene. Gives up after node_count**2 draws
    and returns the input flagged as a no-op."""
    pool = [n.innovation for n in enabled_nodes(c)]
    existing = {(e.src, e.dst) for e in c.edges if e.link_kind == LINK_LAYER}
    tries = len(pool) ** 2
    for _ in range(tries):
        src = rng.choice(pool)
        dst = rng.choice(pool)
        if src == dst or (src, dst) in existing:
            continue
        candidate = ConnectionGene(0, src, dst)
        if _has_cycle(list(c.edges) + [candidate]):
            continue
        edge = ConnectionGene(registry.edge_id(src, dst), src, dst)
        return _rebuild(c, c.nodes, list(c.edges) + [edge]), True
    return c, False


def toggle_layer_connection(c: Chromosome, rng: random.Random) -> tuple[Chromosome, bool]:
    """Flip the enabled flag of one layer edge.

    A flip is rejected when it would sever every input-to-output path or
    (when re-enabling) create a cycle or duplicate an enabled edge; rejected
    flips fall through to another edge. Nodes stranded off every path by a
    disable are themselves soft-disabled, so toggling the same edge twice
    restores the original chromosome.
    """
    candidates = [e for e in c.edges if e.link_kind == LINK_LAYER]
    if not candidates:
        return c, False
    order = rng.sample(candidates, len(candidates))
    for target in order:
        edges = [replace(e, enabled=not e.enabled) if e.innovation == target.innovation else e
                 for e in c.edges]
        if _has_cycle(edges):
            continue
        if not target.enabled and any(
                e.enabled and e.innovation != target.innovation
                and (e.src, e.dst, e.link_kind) == (target.src, target.dst, target.link_kind)
                for e in edges):
            continue
        if not _path_nodes(c.nodes, edges):
            continue
        return _rebuild(c, c.nodes, edges), True
    return c, False


def mutate_skip_connection(c: ModuleChromosome, registry: InnovationRegistry,
                           rng: random.Random) -> tuple[ModuleChromosome, bool]:
    """Add (p=1/2) or remove a recurrent cell_skip edge between two lstm nodes."""
    if is_blueprint(c):
        raise ChromosomeKindError("cell_skip mutation applies to module chromosomes")
    lstm_ids = [n.innovation for n in enabled_nodes(c) if n.layer_kind == LSTM_KIND]
    if len(lstm_ids) < 2:
        raise InvalidChromosomeError("cell_skip mutation needs at least two lstm nodes")
    skips = [e for e in c.edges if e.link_kind == LINK_SKIP]
    if rng.random() < 0.5:
        taken = {(e.src, e.dst) for e in skips}
        pairs = [(a, b) for a in lstm_ids for b in lstm_ids if a != b and (a, b) not in taken]
        if not pairs:
            return c, False
        src, dst = rng.choice(pairs)
        edge = ConnectionGene(registry.edge_id(src, dst, LINK_SKIP), src, dst, link_kind=LINK_SKIP)
        return _rebuild(c, c.nodes, list(c.edges) + [edge]), True
    if not skips:
        return c, False
    victim = rng.choice(skips)
    edges = [e for e in c.edges if e.innovation != victim.innovation]
    return _rebuild(c, c.nodes, edges), True


def resample_species_pointers(c: BlueprintChromosome, rate: float,
                              species_ids: Sequence[int],
                              rng: random.Random) -> BlueprintChromosome:
    """Re-point each blueprint node, independently with probability ``rate``,
    at a module species drawn uniformly from the live set."""
    if not is_blueprint(c):
        raise ChromosomeKindError("pointer resampling applies to blueprint chromosomes")
    ids = list(species_ids)
    if not ids:
        return c
    nodes = []
    for n in c.nodes:
        if rng.random() < rate:
            nodes.append(replace(n, species_pointer=rng.choice(ids)))
        else:
            nodes.append(n)
    return make_blueprint(nodes, c.edges, c.globals)


# ---------------------------------------------------------------------------
# Alignment, crossover, compatibility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneAlignment:
    """Partition of two chromosomes' gene ids by historical marking."""

    matching: tuple[int, ...]
    disjoint_a: tuple[int, ...]
    disjoint_b: tuple[int, ...]
    excess_a: tuple[int, ...]
    excess_b: tuple[int, ...]


def _gene_index(c: Chromosome) -> dict[int, Any]:
    index = {g.innovation: g for g in c.nodes}
    index.update({g.innovation: g for g in c.edges})
    return index


def align_genes(a: Chromosome, b: Chromosome) -> GeneAlignment:
    """Line up node and edge genes by innovation id. Non-matching ids inside
    the other parent's id range are disjoint; the rest are excess."""
    ids_a, ids_b = set(_gene_index(a)), set(_gene_index(b))
    max_a, max_b = max(ids_a), max(ids_b)
    only_a, only_b = ids_a - ids_b, ids_b - ids_a
    return GeneAlignment(
        matching=tuple(sorted(ids_a & ids_b)),
        disjoint_a=tuple(sorted(i for i in only_a if i <= max_b)),
        disjoint_b=tuple(sorted(i for i in only_b if i <= max_a)),
        excess_a=tuple(sorted(i for i in only_a if i > max_b)),
        excess_b=tuple(sorted(i for i in only_b if i > max_a)),
    )


def _require_same_kind(a: Chromosome, b: Chromosome) -> None:
    if is_blueprint(a) != is_blueprint(b):
        raise ChromosomeKindError("cannot combine a module chromosome with a blueprint chromosome")


def _child_edge_flag(ga: ConnectionGene, gb: ConnectionGene, chosen: ConnectionGene,
                     rng: random.Random) -> bool:
    # Disabled in both parents stays disabled; disabled in exactly one parent
    # is re-disabled with probability 0.75; otherwise the chosen gene's flag
    # stands. Identical parents therefore reproduce their flags exactly.
    if not ga.enabled and not gb.enabled:
        return False
    if ga.enabled != gb.enabled:
        return False if rng.random() < 0.75 else True
    return chosen.enabled


def _recombine_matching_node(na, nb, rng: random.Random):
    chosen = na if rng.random() < 0.5 else nb
    if isinstance(chosen, LayerGene):
        return replace(chosen, params=crossover_tables(na.params, nb.params, rng))
    return chosen


def _repair(kind_blueprint: bool, nodes: list[Any], edges: list[ConnectionGene],
            globals_table: HyperparameterTable) -> Chromosome:
    """Restore the graph invariants after gene mixing.

    Drops dangling or self-loop edges, de-duplicates enabled edges, breaks
    cycles by disabling the newest edge in each, re-enables edges (oldest
    first) until an input-to-output path exists, prunes nodes unreachable even
    through disabled genes, and drops cell_skip edges whose endpoints stopped
    being lstm layers.
    """
    node_ids = {n.innovation for n in nodes}
    edges = [e for e in edges if e.src in node_ids and e.dst in node_ids and e.src != e.dst]

    seen: set[tuple[int, int, str]] = set()
    deduped = []
    for e in sorted(edges, key=lambda g: g.innovation):
        key = (e.src, e.dst, e.link_kind)
        if e.enabled and key in seen:
            e = replace(e, enabled=False)
        elif e.enabled:
            seen.add(key)
        deduped.append(e)
    edges = deduped

    cycle = _find_cycle_edges(edges)
    while cycle:
        victim = max(cycle, key=lambda g: g.innovation)
        edges = [replace(e, enabled=False) if e.innovation == victim.innovation else e for e in edges]
        cycle = _find_cycle_edges(edges)

    src = _role_id(nodes, ROLE_INPUT)
    dst = _role_id(nodes, ROLE_OUTPUT)
    while not _path_nodes(nodes, edges):
        disabled = [e for e in edges if e.link_kind == LINK_LAYER and not e.enabled]
        revived = False
        for e in sorted(disabled, key=lambda g: g.innovation):
            trial = [replace(x, enabled=True) if x.innovation == e.innovation else x for x in edges]
            if not _has_cycle(trial) and not any(
                    x.enabled and x.innovation != e.innovation
                    and (x.src, x.dst, x.link_kind) == (e.src, e.dst, e.link_kind)
                    for x in trial):
                edges = trial
                revived = True
                break
        if not revived:
            raise InvalidChromosomeError("crossover produced a chromosome with no restorable path")

    # Prune genes disconnected even through disabled edges; soft-disabled
    # detours stay (a later toggle can revive them).
    fwd: dict[int, list[int]] = {}
    back: dict[int, list[int]] = {}
    for e in edges:
        if e.link_kind == LINK_LAYER:
            fwd.setdefault(e.src, []).append(e.dst)
            back.setdefault(e.dst, []).append(e.src)
    keep = _reachable(src, fwd) & _reachable(dst, back)
    nodes = [n for n in nodes if n.innovation in keep]
    edges = [e for e in edges if e.src in keep and e.dst in keep]

    if not kind_blueprint:
        kinds = {n.innovation: n.layer_kind for n in nodes}
        edges = [e for e in edges
                 if e.link_kind == LINK_LAYER
                 or (kinds.get(e.src) == LSTM_KIND and kinds.get(e.dst) == LSTM_KIND)]
        return make_module(nodes, edges, globals_table)
    return make_blueprint(nodes, edges, globals_table)


def crossover(a: Chromosome, b: Chromosome, fitness_a: float, fitness_b: float,
              rng: random.Random) -> Chromosome:
    """Recombine two chromosomes of one kind, aligning genes by innovation id.

    Matching genes are picked uniformly from either parent (layer genes also
    recombine their hyperparameter tables); disjoint and excess genes come from
    the fitter parent, ties favoring ``a``. The child is repaired so the graph
    invariants hold.
    """
    _require_same_kind(a, b)
    fitter = a if fitness_a >= fitness_b else b
    index_a, index_b = _gene_index(a), _gene_index(b)
    alignment = align_genes(a, b)

    nodes: list[Any] = []
    edges: list[ConnectionGene] = []

    def keep(gene: Any) -> None:
        (edges if isinstance(gene, ConnectionGene) else nodes).append(gene)

    for gid in alignment.matching:
        ga, gb = index_a[gid], index_b[gid]
        if isinstance(ga, ConnectionGene):
            chosen = ga if rng.random() < 0.5 else gb
            keep(replace(chosen, enabled=_child_edge_flag(ga, gb, chosen, rng)))
        else:
            keep(_recombine_matching_node(ga, gb, rng))
    fitter_index = index_a if fitter is a else index_b
    fitter_only = (alignment.disjoint_a + alignment.excess_a if fitter is a
                   else alignment.disjoint_b + alignment.excess_b)
    for gid in sorted(fitter_only):
        keep(fitter_index[gid])

    globals_table = crossover_tables(a.globals, b.globals, rng)
    return _repair(is_blueprint(a), nodes, edges, globals_table)


def _matching_node_distance(a: Chromosome, b: Chromosome, matching: Iterable[int]) -> float:
    index_a, index_b = _gene_index(a), _gene_index(b)
    distances = []
    for gid in matching:
        ga, gb = index_a[gid], index_b[gid]
        if isinstance(ga, ConnectionGene):
            continue
        if isinstance(ga, LayerGene):
            distances.append(table_distance(ga.params, gb.params))
        else:  # blueprint nodes disagree 0/1 on their species pointer
            distances.append(0.0 if ga.species_pointer == gb.species_pointer else 1.0)
    return sum(distances) / len(distances) if distances else 0.0


def compatibility_distance(a: Chromosome, b: Chromosome,
                           coeffs: tuple[float, float, float] = DEFAULT_COMPAT_COEFFS) -> float:
    """c1*E/N + c2*D/N + c3 * mean node-gene parameter distance, with N the
    larger gene count. Symmetric, zero on self."""
    _require_same_kind(a, b)
    c1, c2, c3 = coeffs
    alignment = align_genes(a, b)
    excess = len(alignment.excess_a) + len(alignment.excess_b)
    disjoint = len(alignment.disjoint_a) + len(alignment.disjoint_b)
    n = max(len(a.nodes) + len(a.edges), len(b.nodes) + len(b.edges), 1)
    return (c1 * excess / n + c2 * disjoint / n
            + c3 * _matching_node_distance(a, b, alignment.matching))


# ---------------------------------------------------------------------------
# Composite variation (what reproduction applies to each offspring)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MutationRates:
    parameter: float = 0.3
    add_node: float = 0.05
    add_edge: float = 0.1
    toggle_connection: float = 0.1
    skip_connection: float = 0.1
    pointer_resample: float = 0.1


@dataclass(frozen=True)
class VariationOps:
    """The operator bundle reproduction needs for one population."""

    registry: InnovationRegistry
    crossover: Callable[[Chromosome, Chromosome, float, float, random.Random], Chromosome]
    mutate: Callable[[Chromosome, random.Random], Chromosome]
    distance: Callable[[Chromosome, Chromosome], float]


def _mutate_module(c: ModuleChromosome, registry: InnovationRegistry,
                   space: HyperparameterSpace, rates: MutationRates,
                   rng: random.Random) -> ModuleChromosome:
    nodes = [replace(n, params=mutate_table(n.params, rates.parameter, rng)) for n in c.nodes]
    c = make_module(nodes, c.edges, mutate_table(c.globals, rates.parameter, rng))
    if rng.random() < rates.add_node:
        c, _ = mutate_add_node(c, registry, rng, space=space)
    if rng.random() < rates.add_edge:
        c, _ = mutate_add_edge(c, registry, rng)
    if rng.random() < rates.toggle_connection:
        c, _ = toggle_layer_connection(c, rng)
    if rng.random() < rates.skip_connection:
        if sum(1 for n in enabled_nodes(c) if n.layer_kind == LSTM_KIND) >= 2:
            c, _ = mutate_skip_connection(c, registry, rng)
    return c


def _mutate_blueprint(c: BlueprintChromosome, registry: InnovationRegistry,
                      space: HyperparameterSpace, rates: MutationRates,
                      species_ids: Sequence[int], rng: random.Random) -> BlueprintChromosome:
    c = make_blueprint(c.nodes, c.edges, mutate_table(c.globals, rates.parameter, rng))
    c = resample_species_pointers(c, rates.pointer_resample, species_ids, rng)
    if rng.random() < rates.add_node:
        c, _ = mutate_add_node(c, registry, rng, species_ids=species_ids)
    if rng.random() < rates.add_edge:
        c, _ = mutate_add_edge(c, registry, rng)
    if rng.random() < rates.toggle_connection:
        c, _ = toggle_layer_connection(c, rng)
    return c


def module_variation(space: HyperparameterSpace, registry: InnovationRegistry,
                     rates: MutationRates = MutationRates(),
                     coeffs: tuple[float, float, float] = DEFAULT_COMPAT_COEFFS) -> VariationOps:
    return VariationOps(
        registry=registry,
        crossover=crossover,
        mutate=lambda c, rng: _mutate_module(c, registry, space, rates, rng),
        distance=lambda a, b: compatibility_distance(a, b, coeffs),
    )


def blueprint_variation(space: HyperparameterSpace, registry: InnovationRegistry,
                        species_ids: Sequence[int],
                        rates: MutationRates = MutationRates(),
                        coeffs: tuple[float, float, float] = DEFAULT_COMPAT_COEFFS) -> VariationOps:
    ids = tuple(species_ids)
    return VariationOps(
        registry=registry,
        crossover=crossover,
        mutate=lambda c, rng: _mutate_blueprint(c, registry, space, rates, ids, rng),
        distance=lambda a, b: compatibility_distance(a, b, coeffs),
    )


# ---------------------------------------------------------------------------
# Canonical serialization (checkpoints, the export command, content ids)
# ---------------------------------------------------------------------------

def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def chromosome_to_dict(c: Chromosome) -> dict[str, Any]:
    d: dict[str, Any] = {
        "kind": "blueprint" if is_blueprint(c) else "module",
        "edges": [
            {"innovation": e.innovation, "src": e.src, "dst": e.dst,
             "enabled": e.enabled, "link_kind": e.link_kind}
            for e in c.edges
        ],
        "globals": dict(c.globals.values),
    }
    if is_blueprint(c):
        d["nodes"] = [
            {"innovation": n.innovation, "role": n.role, "species_pointer": n.species_pointer,
             "enabled": n.enabled}
            for n in c.nodes
        ]
    else:
        d["nodes"] = [
            {"innovation": n.innovation, "role": n.role, "layer_kind": n.layer_kind,
             "params": dict(n.params.values), "enabled": n.enabled}
            for n in c.nodes
        ]
    return d


def chromosome_from_dict(d: dict[str, Any], space: HyperparameterSpace) -> Chromosome:
    edges = tuple(
        ConnectionGene(e["innovation"], e["src"], e["dst"], e["enabled"], e["link_kind"])
        for e in d["edges"]
    )
    globals_table = HyperparameterTable(tuple(space.global_params), dict(d["globals"]))
    if d["kind"] == "blueprint":
        nodes = tuple(
            BlueprintNode(n["innovation"], n["role"], n["species_pointer"], n["enabled"])
            for n in d["nodes"]
        )
        return BlueprintChromosome(nodes, edges, globals_table)
    nodes = tuple(
        LayerGene(n["innovation"], n["role"], n["layer_kind"],
                  HyperparameterTable(tuple(space.node_params), dict(n["params"])), n["enabled"])
        for n in d["nodes"]
    )
    return ModuleChromosome(nodes, edges, globals_table)


def chromosome_id(c: Chromosome) -> str:
    """Stable content id: equal chromosomes share it, so elites and clones
    attribute fitness consistently."""
    digest = hashlib.sha1(canonical_json(chromosome_to_dict(c)).encode()).hexdigest()
    return digest[:12]
