"""Species partitioning, fitness sharing, offspring allocation, reproduction,
and the single-population generation step.

A population is partitioned by compatibility distance against per-species
representatives drawn from the previous generation. Offspring counts are
proportional to fitness-shared species mass, rounded by largest remainder so
they always sum to the configured population size. Reproduction is truncation
selection inside each species with elitism, crossover, and mutation, followed
by global re-speciation.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .genome import VariationOps, chromosome_id


class MissingFitnessError(KeyError):
    """A member reached reproduction without an assigned fitness."""


@dataclass
class SpeciesMember:
    chromosome: Any
    fitness: float | None = None


@dataclass
class Species:
    id: int
    representative: Any
    members: list[SpeciesMember] = field(default_factory=list)
    staleness: int = 0
    best_fitness: float | None = None


@dataclass
class Population:
    species: list[Species]
    size: int
    generation: int = 0
    next_species_id: int = 1

    def members(self) -> list[SpeciesMember]:
        return [m for sp in sorted(self.species, key=lambda s: s.id) for m in sp.members]

    def chromosomes(self) -> list[Any]:
        return [m.chromosome for m in self.members()]


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    species_count: int
    best_fitness: float
    mean_fitness: float
    best_id: str
    best_chromosome: Any


CSV_HEADER = "generation,species_count,best_fitness,mean_fitness,best_id"


def stats_csv_row(stats: GenerationStats) -> str:
    return (f"{stats.generation},{stats.species_count},{stats.best_fitness!r},"
            f"{stats.mean_fitness!r},{stats.best_id}")


def speciate(individuals: Sequence[Any], prev_species: Sequence[Species], threshold: float,
             distance: Callable[[Any, Any], float],
             next_species_id: int) -> tuple[list[Species], int]:
    """Assign each individual to the first species (in stable id order) whose
    representative lies within ``threshold``; otherwise it founds a new species
    with itself as representative. New species accept later individuals in the
    same pass. Species left empty are dropped.
    """
    if threshold <= 0:
        raise ValueError("compatibility threshold must be positive")
    pools: list[Species] = [
        Species(sp.id, sp.representative, [], sp.staleness, sp.best_fitness)
        for sp in sorted(prev_species, key=lambda s: s.id)
    ]
    for individual in individuals:
        for sp in pools:
            if distance(individual, sp.representative) < threshold:
                sp.members.append(SpeciesMember(individual))
                break
        else:
            pools.append(Species(next_species_id, individual, [SpeciesMember(individual)]))
            next_species_id += 1
    return [sp for sp in pools if sp.members], next_species_id


def allocate_offspring(species: Sequence[Species], total: int, *,
                       staleness_limit: int = 15,
                       exempt: frozenset[int] = frozenset()) -> dict[int, int]:
    """Largest-remainder split of ``total`` offspring proportional to each
    species' fitness-shared mass (member fitness divided by species size).
    Stale species (beyond ``staleness_limit``, unless exempt) get zero; every
    eligible species gets at least one; the allocations sum to ``total``.
    """
    live = [sp for sp in sorted(species, key=lambda s: s.id) if sp.members]
    eligible = [sp for sp in live if sp.staleness <= staleness_limit or sp.id in exempt]
    if not eligible:
        eligible = live
    if total < len(eligible):
        raise ValueError(f"total {total} cannot cover {len(eligible)} live species")

    masses = []
    for sp in eligible:
        shared = [max(0.0, m.fitness) / len(sp.members) for m in sp.members
                  if m.fitness is not None]
        masses.append(math.fsum(shared))
    scale = math.fsum(masses)
    if scale <= 0.0:
        quotas = [total / len(eligible)] * len(eligible)
    else:
        quotas = [m / scale * total for m in masses]

    counts = [int(math.floor(q)) for q in quotas]
    remainders = sorted(range(len(eligible)), key=lambda i: (-(quotas[i] - counts[i]), eligible[i].id))
    leftover = total - sum(counts)
    for i in remainders[:leftover]:
        counts[i] += 1

    # Guarantee one offspring per eligible species, funded by the largest slot.
    for i, sp in enumerate(eligible):
        while counts[i] == 0:
            donor = max(range(len(eligible)), key=lambda j: (counts[j], -eligible[j].id))
            if counts[donor] <= 1:
                break
            counts[donor] -= 1
            counts[i] += 1

    allocation = {sp.id: 0 for sp in live}
    allocation.update({sp.id: c for sp, c in zip(eligible, counts)})
    return allocation


def _bind_fitnesses(pop: Population, fitnesses: dict[str, float]) -> None:
    for sp in pop.species:
        for member in sp.members:
            cid = chromosome_id(member.chromosome)
            if cid not in fitnesses:
                raise MissingFitnessError(f"no fitness for chromosome {cid}")
            member.fitness = fitnesses[cid]


def _update_staleness(pop: Population) -> None:
    for sp in pop.species:
        best_now = max(m.fitness for m in sp.members)
        if sp.best_fitness is None or best_now > sp.best_fitness:
            sp.best_fitness = best_now
            sp.staleness = 0
        else:
            sp.staleness += 1


def reproduce(pop: Population, fitnesses: dict[str, float], ops: VariationOps,
              rng: random.Random, *, threshold: float, elitism: int = 1,
              truncation_fraction: float = 0.5, staleness_limit: int = 15) -> Population:
    """Produce the next generation.

    Per species: members are ranked by fitness, the bottom fraction leaves the
    mating pool, elites are copied bit-identically, and remaining offspring
    come from crossover of two pool parents (cloning when the pool is a
    singleton) followed by mutation. The offspring are then re-speciated
    globally against representatives drawn from this generation's members.
    """
    ops.registry.begin_generation()
    _bind_fitnesses(pop, fitnesses)
    _update_staleness(pop)

    ranked_species = sorted(pop.species, key=lambda s: s.id)
    global_best = max((m for sp in ranked_species for m in sp.members),
                      key=lambda m: m.fitness)
    best_species = next(sp for sp in ranked_species
                        if any(m is global_best for m in sp.members))

    allocation = allocate_offspring(ranked_species, pop.size,
                                    staleness_limit=staleness_limit,
                                    exempt=frozenset({best_species.id}))

    next_individuals: list[Any] = []
    for sp in ranked_species:
        quota = allocation.get(sp.id, 0)
        if quota == 0:
            continue
        ranked = sorted(sp.members, key=lambda m: -m.fitness)
        pool = ranked[:max(1, math.ceil(len(ranked) * (1.0 - truncation_fraction)))]
        elites = ranked[:min(elitism, quota)]
        next_individuals.extend(m.chromosome for m in elites)
        for _ in range(quota - len(elites)):
            if len(pool) == 1:
                child = pool[0].chromosome
            else:
                pa, pb = rng.sample(pool, 2)
                child = ops.crossover(pa.chromosome, pb.chromosome,
                                      pa.fitness, pb.fitness, rng)
            next_individuals.append(ops.mutate(child, rng))

    for sp in ranked_species:
        sp.representative = rng.choice(sp.members).chromosome

    species, next_id = speciate(next_individuals, ranked_species, threshold,
                                ops.distance, pop.next_species_id)
    return Population(species=species, size=pop.size,
                      generation=pop.generation + 1, next_species_id=next_id)


def initial_population(individuals: Sequence[Any], size: int, threshold: float,
                       distance: Callable[[Any, Any], float]) -> Population:
    species, next_id = speciate(individuals, [], threshold, distance, 1)
    return Population(species=species, size=size, generation=0, next_species_id=next_id)


def population_stats(pop: Population, fitnesses: dict[str, float]) -> GenerationStats:
    members = pop.members()
    scored = [(fitnesses[chromosome_id(m.chromosome)], chromosome_id(m.chromosome), m.chromosome)
              for m in members]
    best = max(scored, key=lambda t: t[0])
    return GenerationStats(
        generation=pop.generation,
        species_count=len(pop.species),
        best_fitness=best[0],
        mean_fitness=math.fsum(s[0] for s in scored) / len(scored),
        best_id=best[1],
        best_chromosome=best[2],
    )


def deepneat_generation(pop: Population, evaluate_batch: Callable[[list[Any]], list[float]],
                        ops: VariationOps, rng: random.Random, *, threshold: float,
                        elitism: int = 1, truncation_fraction: float = 0.5,
                        staleness_limit: int = 15) -> tuple[Population, GenerationStats]:
    """One generation of the single-population loop: evaluate every member,
    record stats, reproduce."""
    chromosomes = pop.chromosomes()
    scores = evaluate_batch(chromosomes)
    fitnesses = {chromosome_id(c): s for c, s in zip(chromosomes, scores)}
    stats = population_stats(pop, fitnesses)
    new_pop = reproduce(pop, fitnesses, ops, rng, threshold=threshold, elitism=elitism,
                        truncation_fraction=truncation_fraction, staleness_limit=staleness_limit)
    return new_pop, stats
