"""Two-population coevolution: blueprints over module species, assembled-network
sampling, and fitness attribution back to both populations.

Each generation samples networks by drawing blueprints round-robin (so every
blueprint is scored every generation) and substituting one randomly chosen
module per pointed-to species; blueprint nodes sharing a species pointer share
the module. Network fitnesses flow back as the mean over the networks each
blueprint or module appeared in, then both populations reproduce independently
with their own innovation registries.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .assembly import AssembledNetwork, AssemblyError, MergePolicy, assemble
from .evaluator import FITNESS_FLOOR, FitnessReport
from .genome import (
    BlueprintChromosome,
    InnovationRegistry,
    ModuleChromosome,
    MutationRates,
    blueprint_variation,
    chromosome_id,
    minimal_blueprint,
    minimal_chromosome,
    module_variation,
    resample_species_pointers,
)
from .hyperparams import HyperparameterSpace
from .speciation import Population, Species, initial_population, reproduce

logger = logging.getLogger(__name__)


class CoevolutionError(RuntimeError):
    pass


@dataclass
class CoPopulations:
    blueprints: Population
    modules: Population
    assembly_count: int


@dataclass
class AssemblyRecord:
    """Provenance of one assembled network: which blueprint, and which concrete
    module stood in for each pointed-to species."""

    network_id: str
    blueprint_id: str
    module_choice: dict[int, str]
    fitness: float | None = None


def record_to_dict(record: AssemblyRecord) -> dict[str, Any]:
    return {
        "network_id": record.network_id,
        "blueprint_id": record.blueprint_id,
        "module_choice": {str(k): v for k, v in record.module_choice.items()},
        "fitness": record.fitness,
    }


def record_from_dict(d: dict[str, Any]) -> AssemblyRecord:
    return AssemblyRecord(d["network_id"], d["blueprint_id"],
                          {int(k): v for k, v in d["module_choice"].items()},
                          d.get("fitness"))


def _live_module_species(co: CoPopulations) -> list[Species]:
    return [sp for sp in sorted(co.modules.species, key=lambda s: s.id) if sp.members]


def sample_assemblies(co: CoPopulations, rng: random.Random) -> list[AssemblyRecord]:
    """Draw ``assembly_count`` records: blueprints round-robin (usage counts
    differ by at most one), one uniformly chosen module per distinct species
    pointer. Pointers to extinct species are re-pointed uniformly at a live
    species first, and the repaired blueprint replaces the original in the
    population."""
    species = _live_module_species(co)
    if not species:
        raise CoevolutionError("no live module species to sample from")
    members_by_species = {sp.id: [m.chromosome for m in sp.members] for sp in species}
    live_ids = sorted(members_by_species)

    blueprint_members = [m for sp in sorted(co.blueprints.species, key=lambda s: s.id)
                         for m in sp.members]
    if not blueprint_members:
        raise CoevolutionError("blueprint population is empty")

    records = []
    generation = co.blueprints.generation
    for k in range(co.assembly_count):
        member = blueprint_members[k % len(blueprint_members)]
        blueprint = member.chromosome
        if any(n.species_pointer not in members_by_species for n in blueprint.nodes):
            blueprint = _repoint_dangling(blueprint, live_ids, rng)
            member.chromosome = blueprint  # persist the repair into the genome
        choice: dict[int, str] = {}
        for pointer in sorted({n.species_pointer for n in blueprint.nodes if n.enabled}):
            module = rng.choice(members_by_species[pointer])
            choice[pointer] = chromosome_id(module)
        records.append(AssemblyRecord(f"g{generation:04d}-n{k:04d}",
                                      chromosome_id(blueprint), choice))
    return records


def _repoint_dangling(blueprint: BlueprintChromosome, live_ids: list[int],
                      rng: random.Random) -> BlueprintChromosome:
    from dataclasses import replace as _replace
    from .genome import make_blueprint

    nodes = [n if n.species_pointer in live_ids
             else _replace(n, species_pointer=rng.choice(live_ids))
             for n in blueprint.nodes]
    return make_blueprint(nodes, blueprint.edges, blueprint.globals)


def attribute_fitness(records: list[AssemblyRecord]) -> tuple[dict[str, float], dict[str, float]]:
    """Mean network fitness per blueprint id and per module id, over the
    records each appears in. Uses compensated summation."""
    if not records:
        raise CoevolutionError("cannot attribute fitness without records")
    blueprint_scores: dict[str, list[float]] = {}
    module_scores: dict[str, list[float]] = {}
    for record in records:
        if record.fitness is None:
            raise CoevolutionError(f"record {record.network_id} has no fitness")
        blueprint_scores.setdefault(record.blueprint_id, []).append(record.fitness)
        for module_id in set(record.module_choice.values()):
            module_scores.setdefault(module_id, []).append(record.fitness)
    return ({k: math.fsum(v) / len(v) for k, v in blueprint_scores.items()},
            {k: math.fsum(v) / len(v) for k, v in module_scores.items()})


@dataclass
class GenerationContext:
    """Everything one coevolution step needs besides the populations."""

    space: HyperparameterSpace
    module_registry: InnovationRegistry
    blueprint_registry: InnovationRegistry
    policy: MergePolicy
    input_size: tuple[int, ...]
    evaluate: Callable[[list[AssembledNetwork]], list[FitnessReport]]
    rates: MutationRates = MutationRates()
    compat_coeffs: tuple[float, float, float] = (1.0, 1.0, 0.4)
    compat_threshold: float = 0.6
    elitism: int = 1
    truncation_fraction: float = 0.5
    staleness_limit: int = 15
    record_sink: Callable[[AssemblyRecord], None] | None = None


@dataclass
class GenerationResult:
    co: CoPopulations
    records: list[AssemblyRecord]
    best_record: AssemblyRecord
    best_network: AssembledNetwork | None
    best_fitness: float
    mean_fitness: float


def evolve_generation(co: CoPopulations, ctx: GenerationContext,
                      rng: random.Random) -> GenerationResult:
    """One full coevolution step: sample, assemble, evaluate behind the
    generation barrier, attribute, and reproduce both populations in lockstep.
    Assembly or evaluator failures floor that record's fitness and are logged,
    never fatal."""
    records = sample_assemblies(co, rng)
    blueprint_index = {chromosome_id(m.chromosome): m.chromosome
                       for sp in co.blueprints.species for m in sp.members}
    module_index = {chromosome_id(m.chromosome): m.chromosome
                    for sp in co.modules.species for m in sp.members}

    networks: dict[str, AssembledNetwork] = {}
    for record in records:
        if record.network_id in networks:
            continue
        try:
            networks[record.network_id] = assemble(
                blueprint_index[record.blueprint_id],
                {p: module_index[mid] for p, mid in record.module_choice.items()},
                ctx.policy, ctx.input_size, provenance=record_to_dict(record))
        except AssemblyError as exc:
            logger.warning("assembly of %s failed, flooring fitness: %s",
                           record.network_id, exc)

    reports = ctx.evaluate(list(networks.values()))
    fitness_by_id = {r.network_id: r.fitness for r in reports}
    for record in records:
        fitness = fitness_by_id.get(record.network_id, FITNESS_FLOOR)
        record.fitness = fitness if math.isfinite(fitness) else FITNESS_FLOOR
        if ctx.record_sink is not None:
            ctx.record_sink(record)

    blueprint_fitness, module_fitness = attribute_fitness(records)
    _fill_unevaluated_modules(co, module_fitness)

    module_ops = module_variation(ctx.space, ctx.module_registry, ctx.rates, ctx.compat_coeffs)
    new_modules = reproduce(co.modules, module_fitness, module_ops, rng,
                            threshold=ctx.compat_threshold, elitism=ctx.elitism,
                            truncation_fraction=ctx.truncation_fraction,
                            staleness_limit=ctx.staleness_limit)

    live_ids = [sp.id for sp in new_modules.species if sp.members]
    blueprint_ops = blueprint_variation(ctx.space, ctx.blueprint_registry, live_ids,
                                        ctx.rates, ctx.compat_coeffs)
    new_blueprints = reproduce(co.blueprints, blueprint_fitness, blueprint_ops, rng,
                               threshold=ctx.compat_threshold, elitism=ctx.elitism,
                               truncation_fraction=ctx.truncation_fraction,
                               staleness_limit=ctx.staleness_limit)

    best = max(records, key=lambda r: r.fitness)
    mean = math.fsum(r.fitness for r in records) / len(records)
    return GenerationResult(
        co=CoPopulations(new_blueprints, new_modules, co.assembly_count),
        records=records, best_record=best,
        best_network=networks.get(best.network_id),
        best_fitness=best.fitness, mean_fitness=mean)


def _fill_unevaluated_modules(co: CoPopulations, module_fitness: dict[str, float]) -> None:
    """Modules never sampled into a network inherit their species' mean
    attributed fitness (the population mean when the whole species went
    unsampled), keeping selection defined without rewarding absence."""
    all_scores = list(module_fitness.values())
    global_mean = math.fsum(all_scores) / len(all_scores) if all_scores else FITNESS_FLOOR
    for sp in co.modules.species:
        ids = [chromosome_id(m.chromosome) for m in sp.members]
        scored = [module_fitness[i] for i in ids if i in module_fitness]
        species_mean = math.fsum(scored) / len(scored) if scored else global_mean
        for cid in ids:
            if cid not in module_fitness:
                logger.warning("module %s went unevaluated; inheriting species mean %.4f",
                               cid, species_mean)
                module_fitness[cid] = species_mean


def initial_co_populations(space: HyperparameterSpace, *, blueprint_population: int,
                           module_population: int, assembly_count: int,
                           compat_threshold: float,
                           compat_coeffs: tuple[float, float, float],
                           rng: random.Random) -> CoPopulations:
    """Minimal-complexity starting populations; blueprint pointers are drawn
    uniformly over the initial module species."""
    from .genome import compatibility_distance

    distance = lambda a, b: compatibility_distance(a, b, compat_coeffs)
    modules = [minimal_chromosome(space, rng) for _ in range(module_population)]
    module_pop = initial_population(modules, module_population, compat_threshold, distance)
    species_ids = [sp.id for sp in module_pop.species]
    blueprints = [minimal_blueprint(space, species_ids, rng)
                  for _ in range(blueprint_population)]
    blueprint_pop = initial_population(blueprints, blueprint_population,
                                       compat_threshold, distance)
    return CoPopulations(blueprint_pop, module_pop, assembly_count)
