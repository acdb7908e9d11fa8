"""Independent oracles the engine is checked against. Each reimplements its
target from scratch on purpose; keep them free of engine internals beyond the
public data types."""

from __future__ import annotations

import random

from codeepneat.assembly import MergePolicy, assemble_chromosome
from codeepneat.evaluator import StructuralTarget, surrogate_fitness
from codeepneat.genome import (
    InnovationRegistry,
    minimal_chromosome,
    mutate_add_edge,
    mutate_add_node,
    mutate_table,
    toggle_layer_connection,
)
from dataclasses import replace


def brute_force_alignment(a, b):
    """Partition two chromosomes' gene ids by exhaustive set comparison."""
    ids_a = {g.innovation for g in a.nodes} | {g.innovation for g in a.edges}
    ids_b = {g.innovation for g in b.nodes} | {g.innovation for g in b.edges}
    matching = sorted(ids_a & ids_b)
    max_a, max_b = max(ids_a), max(ids_b)
    disjoint_a = sorted(i for i in ids_a - ids_b if i <= max_b)
    disjoint_b = sorted(i for i in ids_b - ids_a if i <= max_a)
    excess_a = sorted(i for i in ids_a - ids_b if i > max_b)
    excess_b = sorted(i for i in ids_b - ids_a if i > max_a)
    return matching, disjoint_a, disjoint_b, excess_a, excess_b


def recompute_attribution(records):
    """Naive per-membership recomputation of mean fitness."""
    blueprint_sums: dict[str, list[float]] = {}
    module_sums: dict[str, list[float]] = {}
    for record in records:
        blueprint_sums.setdefault(record.blueprint_id, []).append(record.fitness)
        for module_id in set(record.module_choice.values()):
            module_sums.setdefault(module_id, []).append(record.fitness)
    blueprints = {k: sum(v) / len(v) for k, v in blueprint_sums.items()}
    modules = {k: sum(v) / len(v) for k, v in module_sums.items()}
    return blueprints, modules


def random_search_best(space, target: StructuralTarget, policy: MergePolicy,
                       input_size, evaluations: int, seed: int,
                       max_mutations: int = 12) -> float:
    """Random-search baseline at a fixed evaluation budget: every evaluation
    scores an independent random chromosome grown by a uniform random walk of
    the same mutation operators evolution uses."""
    rng = random.Random(seed)
    registry = InnovationRegistry()
    best = 0.0
    for _ in range(evaluations):
        c = minimal_chromosome(space, rng)
        for _ in range(rng.randint(0, max_mutations)):
            op = rng.randrange(4)
            if op == 0:
                c, _ = mutate_add_node(c, registry, rng, space=space)
            elif op == 1:
                c, _ = mutate_add_edge(c, registry, rng)
            elif op == 2:
                c, _ = toggle_layer_connection(c, rng)
            else:
                nodes = [replace(n, params=mutate_table(n.params, 0.3, rng)) for n in c.nodes]
                from codeepneat.genome import make_module
                c = make_module(nodes, c.edges, mutate_table(c.globals, 0.3, rng))
        net = assemble_chromosome(c, policy, input_size, provenance={"network_id": "rs"})
        best = max(best, surrogate_fitness(net, target).fitness)
    return best
