"""Run orchestration: config loading, the generation loop for both algorithms,
checkpoint/resume, and the inspection/export/worker commands.

Commands: run, resume, inspect, export, worker. Exit codes: 0 ok, 1 config
error, 2 runtime error. The output directory can be overridden with the
CODEEPNEAT_OUT environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from .assembly import (
    AssembledNetwork,
    AssemblyError,
    MergePolicy,
    assemble,
    assemble_chromosome,
    export_network,
    network_from_dict,
    network_to_dict,
    to_dot,
)
from .coevolution import (
    AssemblyRecord,
    CoPopulations,
    GenerationContext,
    evolve_generation,
    initial_co_populations,
    record_to_dict,
)
from .config import ConfigError, EvolutionConfig, config_from_dict, config_to_dict, with_overrides
from .distrib import (
    EvalJob,
    LocalWorkerPool,
    SocketWorkerPool,
    dispatch_generation,
    evaluate_in_process,
    worker_loop,
)
from .evaluator import (
    EvaluationBudget,
    FitnessReport,
    StructuralTarget,
    SurrogateEvaluator,
    TrainerEvaluator,
    synthetic_task,
)
from .genome import (
    InnovationRegistry,
    canonical_json,
    chromosome_from_dict,
    chromosome_id,
    chromosome_to_dict,
    compatibility_distance,
    minimal_chromosome,
    module_variation,
)
from .presets import PRESETS, preset_config
from .speciation import (
    Population,
    Species,
    SpeciesMember,
    deepneat_generation,
    initial_population,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
ENV_OUT_DIR = "CODEEPNEAT_OUT"

CSV_HEADER = ("generation,module_species,blueprint_species,"
              "best_fitness,mean_fitness,best_id")


# ---------------------------------------------------------------------------
# Run state and checkpointing
# ---------------------------------------------------------------------------

@dataclass
class RunState:
    config: EvolutionConfig
    rng: random.Random
    module_registry: InnovationRegistry
    blueprint_registry: InnovationRegistry
    co: CoPopulations | None = None          # codeepneat
    population: Population | None = None     # deepneat
    generation: int = 0
    history: list[str] = field(default_factory=list)
    best_fitness: float | None = None
    best_network: dict[str, Any] | None = None
    best_id: str | None = None


def _population_to_dict(pop: Population) -> dict[str, Any]:
    return {
        "size": pop.size,
        "generation": pop.generation,
        "next_species_id": pop.next_species_id,
        "species": [
            {
                "id": sp.id,
                "staleness": sp.staleness,
                "best_fitness": sp.best_fitness,
                "representative": chromosome_to_dict(sp.representative),
                "members": [
                    {"chromosome": chromosome_to_dict(m.chromosome), "fitness": m.fitness}
                    for m in sp.members
                ],
            }
            for sp in sorted(pop.species, key=lambda s: s.id)
        ],
    }


def _population_from_dict(d: dict[str, Any], config: EvolutionConfig) -> Population:
    species = []
    for sd in d["species"]:
        species.append(Species(
            id=sd["id"],
            representative=chromosome_from_dict(sd["representative"], config.space),
            members=[SpeciesMember(chromosome_from_dict(m["chromosome"], config.space),
                                   m["fitness"]) for m in sd["members"]],
            staleness=sd["staleness"],
            best_fitness=sd["best_fitness"],
        ))
    return Population(species=species, size=d["size"], generation=d["generation"],
                      next_species_id=d["next_species_id"])


def state_to_dict(state: RunState) -> dict[str, Any]:
    rng_state = state.rng.getstate()
    payload: dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "config": config_to_dict(state.config),
        "generation": state.generation,
        "rng_state": [rng_state[0], list(rng_state[1]), rng_state[2]],
        "registries": {
            "module": state.module_registry.to_state(),
            "blueprint": state.blueprint_registry.to_state(),
        },
        "history": list(state.history),
        "best": {"fitness": state.best_fitness, "network": state.best_network,
                 "network_id": state.best_id},
    }
    if state.co is not None:
        payload["populations"] = {
            "blueprints": _population_to_dict(state.co.blueprints),
            "modules": _population_to_dict(state.co.modules),
            "assembly_count": state.co.assembly_count,
        }
    else:
        payload["populations"] = {"population": _population_to_dict(state.population)}
    return payload


def state_from_dict(d: dict[str, Any]) -> RunState:
    config = config_from_dict(d["config"])
    rng = random.Random()
    version, internal, gauss_next = d["rng_state"]
    rng.setstate((version, tuple(internal), gauss_next))
    state = RunState(
        config=config,
        rng=rng,
        module_registry=InnovationRegistry.from_state(d["registries"]["module"]),
        blueprint_registry=InnovationRegistry.from_state(d["registries"]["blueprint"]),
        generation=d["generation"],
        history=list(d["history"]),
        best_fitness=d["best"]["fitness"],
        best_network=d["best"]["network"],
        best_id=d["best"]["network_id"],
    )
    pops = d["populations"]
    if "population" in pops:
        state.population = _population_from_dict(pops["population"], config)
    else:
        state.co = CoPopulations(
            blueprints=_population_from_dict(pops["blueprints"], config),
            modules=_population_from_dict(pops["modules"], config),
            assembly_count=pops["assembly_count"],
        )
    return state


def save_checkpoint(path: Path, state: RunState) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(state_to_dict(state)) + "\n")


def load_checkpoint(path: Path) -> RunState:
    return state_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Evaluation plumbing
# ---------------------------------------------------------------------------

def make_evaluator(config: EvolutionConfig):
    if config.evaluator == "trainer":
        return TrainerEvaluator(synthetic_task(config.task, config.task_size, config.seed))
    widths = {s.name: (s.width if s.kind in ("real", "integer") else None)
              for s in (*config.space.node_params, *config.space.global_params)}
    targets = {name: (value, widths[name])
               for name, value in config.surrogate_param_targets.items()}
    return SurrogateEvaluator(StructuralTarget(
        depth=config.surrogate_depth,
        depth_weight=config.surrogate_depth_weight,
        param_weight=config.surrogate_param_weight,
        param_targets=targets,
    ))


def _job_for(net: AssembledNetwork, config: EvolutionConfig) -> EvalJob:
    network_id = net.provenance["network_id"]
    seed = zlib.crc32(network_id.encode()) ^ config.seed
    return EvalJob(
        job_id=network_id,
        payload=export_network(net, "json"),
        budget=EvaluationBudget(config.epochs, config.sample_cap, seed),
        required_kinds=frozenset(l.kind for l in net.layers),
    )


def make_evaluate(config: EvolutionConfig, pool=None) -> Callable[[list[AssembledNetwork]], list[FitnessReport]]:
    """Evaluation handle: in-process when no pool is given, otherwise
    dispatched through the worker pool behind the generation barrier."""
    evaluator = make_evaluator(config)

    def evaluate(nets: list[AssembledNetwork]) -> list[FitnessReport]:
        jobs = [_job_for(net, config) for net in nets]
        if pool is None:
            return evaluate_in_process(jobs, evaluator)
        return dispatch_generation(jobs, pool)

    return evaluate


# ---------------------------------------------------------------------------
# Run loops
# ---------------------------------------------------------------------------

def initial_state(config: EvolutionConfig) -> RunState:
    rng = random.Random(config.seed)
    state = RunState(config=config, rng=rng,
                     module_registry=InnovationRegistry(),
                     blueprint_registry=InnovationRegistry())
    if config.algorithm == "codeepneat":
        state.co = initial_co_populations(
            config.space,
            blueprint_population=config.blueprint_population,
            module_population=config.module_population,
            assembly_count=config.assembly_count,
            compat_threshold=config.compat_threshold,
            compat_coeffs=config.compat_coeffs,
            rng=rng)
        state.best_network = network_to_dict(_seed_network(state))
        state.best_id = "initial"
    else:
        individuals = [minimal_chromosome(config.space, rng)
                       for _ in range(config.population)]
        distance = lambda a, b: compatibility_distance(a, b, config.compat_coeffs)
        state.population = initial_population(individuals, config.population,
                                              config.compat_threshold, distance)
        first = state.population.chromosomes()[0]
        net = assemble_chromosome(first, _policy(config), config.input_size,
                                  provenance={"network_id": "initial"})
        state.best_network = network_to_dict(net)
        state.best_id = "initial"
    return state


def _policy(config: EvolutionConfig) -> MergePolicy:
    return MergePolicy(method=config.merge_method, downsample=config.downsample)


def _seed_network(state: RunState) -> AssembledNetwork:
    """Deterministic generation-zero network (first blueprint, first module of
    each pointed-to species); what `inspect best` shows before any evaluation."""
    co = state.co
    blueprint = co.blueprints.chromosomes()[0]
    members = {sp.id: [m.chromosome for m in sp.members] for sp in co.modules.species}
    choice = {n.species_pointer: members[n.species_pointer][0] for n in blueprint.nodes}
    return assemble(blueprint, choice, _policy(state.config), state.config.input_size,
                    provenance={"network_id": "initial"})


@dataclass
class RunPaths:
    out_dir: Path

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / "checkpoint.json"

    @property
    def fitness_csv(self) -> Path:
        return self.out_dir / "fitness.csv"

    @property
    def records_dir(self) -> Path:
        return self.out_dir / "records"

    def records_file(self, generation: int) -> Path:
        return self.records_dir / f"gen{generation:04d}.jsonl"

    @property
    def best_dot(self) -> Path:
        return self.out_dir / "best.dot"

    @property
    def best_json(self) -> Path:
        return self.out_dir / "best.json"


def _write_artifacts(paths: RunPaths, state: RunState) -> None:
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    paths.fitness_csv.write_text("\n".join([CSV_HEADER, *state.history]) + "\n")
    if state.best_network is not None:
        net = network_from_dict(state.best_network)
        paths.best_dot.write_text(to_dot(net))
        paths.best_json.write_bytes(export_network(net, "json"))


def run_evolution(state: RunState, *, stop_after: int | None = None,
                  pool=None, echo: Callable[[str], None] | None = None) -> RunState:
    """Advance the run to its configured generation count (or ``stop_after``),
    checkpointing every ``checkpoint_every`` generations and at the end."""
    config = state.config
    paths = RunPaths(Path(config.out_dir))
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    evaluate = make_evaluate(config, pool)
    target = config.generations if stop_after is None else min(stop_after, config.generations)

    while state.generation < target:
        generation = state.generation
        if config.algorithm == "codeepneat":
            row = _codeepneat_step(state, evaluate, paths)
        else:
            row = _deepneat_step(state, evaluate)
        state.generation = generation + 1
        state.history.append(row)
        if echo:
            echo(row)
        if state.generation % config.checkpoint_every == 0 or state.generation >= target:
            save_checkpoint(paths.checkpoint, state)
            _write_artifacts(paths, state)
    save_checkpoint(paths.checkpoint, state)
    _write_artifacts(paths, state)
    return state


def _remember_best(state: RunState, fitness: float, network: AssembledNetwork | None,
                   network_id: str) -> None:
    if state.best_fitness is None or fitness > state.best_fitness:
        state.best_fitness = fitness
        state.best_id = network_id
        if network is not None:
            state.best_network = network_to_dict(network)


def _codeepneat_step(state: RunState, evaluate, paths: RunPaths) -> str:
    config = state.config
    generation = state.generation
    paths.records_dir.mkdir(parents=True, exist_ok=True)
    sink_path = paths.records_file(generation)
    lines: list[str] = []
    ctx = GenerationContext(
        space=config.space,
        module_registry=state.module_registry,
        blueprint_registry=state.blueprint_registry,
        policy=_policy(config),
        input_size=config.input_size,
        evaluate=evaluate,
        rates=config.rates,
        compat_coeffs=config.compat_coeffs,
        compat_threshold=config.compat_threshold,
        elitism=config.elitism,
        truncation_fraction=config.truncation_fraction,
        staleness_limit=config.staleness_limit,
        record_sink=lambda record: lines.append(canonical_json(record_to_dict(record))),
    )
    result = evolve_generation(state.co, ctx, state.rng)
    sink_path.write_text("\n".join(lines) + "\n")
    state.co = result.co
    _remember_best(state, result.best_fitness, result.best_network,
                   result.best_record.network_id)
    return (f"{generation},{len(result.co.modules.species)},"
            f"{len(result.co.blueprints.species)},{result.best_fitness!r},"
            f"{result.mean_fitness!r},{result.best_record.network_id}")


def _deepneat_step(state: RunState, evaluate) -> str:
    config = state.config
    generation = state.generation
    nets_cache: dict[str, AssembledNetwork] = {}

    def evaluate_batch(chromosomes: list[Any]) -> list[float]:
        nets, floored = [], {}
        for idx, chromosome in enumerate(chromosomes):
            network_id = f"g{generation:04d}-m{idx:04d}"
            try:
                net = assemble_chromosome(chromosome, _policy(config), config.input_size,
                                          provenance={"network_id": network_id,
                                                      "chromosome_id": chromosome_id(chromosome)})
                nets.append((idx, net))
                nets_cache[network_id] = net
            except AssemblyError as exc:
                logger.warning("assembly of %s failed, flooring fitness: %s", network_id, exc)
                floored[idx] = 0.0
        reports = evaluate([net for _, net in nets])
        scores = dict(floored)
        for (idx, _), report in zip(nets, reports):
            scores[idx] = report.fitness
        return [scores[i] for i in range(len(chromosomes))]

    ops = module_variation(config.space, state.module_registry, config.rates,
                           config.compat_coeffs)
    new_pop, stats = deepneat_generation(
        state.population, evaluate_batch, ops, state.rng,
        threshold=config.compat_threshold, elitism=config.elitism,
        truncation_fraction=config.truncation_fraction,
        staleness_limit=config.staleness_limit)
    state.population = new_pop

    best_net = next((net for net in nets_cache.values()
                     if net.provenance.get("chromosome_id") == stats.best_id), None)
    _remember_best(state, stats.best_fitness, best_net, stats.best_id)
    return (f"{stats.generation},{stats.species_count},1,"
            f"{stats.best_fitness!r},{stats.mean_fitness!r},{stats.best_id}")


# ---------------------------------------------------------------------------
# Command-line interface
# ---------------------------------------------------------------------------

def load_config_file(path: Path) -> dict[str, Any]:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        return yaml.safe_load(text) or {}
    return json.loads(text)


def build_config(args: argparse.Namespace) -> EvolutionConfig:
    payload: dict[str, Any] = {}
    if getattr(args, "config", None):
        payload = load_config_file(Path(args.config))
    preset = getattr(args, "preset", None) or payload.get("preset")
    if preset:
        base = config_to_dict(preset_config(preset, seed=payload.get("seed", args.seed or 1)))
        base.update({k: v for k, v in payload.items() if k not in ("preset",)})
        payload = base
        payload["preset"] = preset
    if getattr(args, "seed", None) is not None:
        payload["seed"] = args.seed
    config = config_from_dict(payload)
    overrides: dict[str, Any] = {}
    if getattr(args, "generations", None) is not None:
        overrides["generations"] = args.generations
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    if os.environ.get(ENV_OUT_DIR):
        overrides["out_dir"] = os.environ[ENV_OUT_DIR]
    return with_overrides(config, **overrides)


def _make_pool(config: EvolutionConfig, listen: str | None):
    if listen:
        host, port = listen.rsplit(":", 1)
        return SocketWorkerPool(host, int(port), expected_workers=max(1, config.workers))
    if config.workers > 0:
        return LocalWorkerPool(lambda: make_evaluator(config), config.workers)
    return None


def _cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    state = initial_state(config)
    pool = _make_pool(config, args.listen)
    try:
        state = run_evolution(state, stop_after=args.stop_after, pool=pool, echo=print)
    finally:
        if pool is not None:
            pool.shutdown()
    print(f"run complete at generation {state.generation}; "
          f"best fitness {state.best_fitness}; artifacts in {config.out_dir}")
    return 0


def _cmd_resume(args: argparse.Namespace) -> int:
    state = load_checkpoint(Path(args.checkpoint))
    pool = _make_pool(state.config, args.listen)
    try:
        state = run_evolution(state, stop_after=args.stop_after, pool=pool, echo=print)
    finally:
        if pool is not None:
            pool.shutdown()
    print(f"resumed run complete at generation {state.generation}; "
          f"best fitness {state.best_fitness}")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    state = load_checkpoint(Path(args.checkpoint))
    query = args.query
    if query == "best":
        if state.best_network is None:
            print("no best network recorded yet")
            return 2
        net = network_from_dict(state.best_network)
        print(f"best network {state.best_id} fitness {state.best_fitness} "
              f"({len(net.layers)} layers, {len(net.edges)} edges)")
        print(to_dot(net), end="")
        return 0
    if query == "species":
        pops = ([("modules", state.co.modules), ("blueprints", state.co.blueprints)]
                if state.co is not None else [("population", state.population)])
        for name, pop in pops:
            print(f"{name}: generation {pop.generation}, "
                  f"{sum(len(sp.members) for sp in pop.species)} members")
            for sp in sorted(pop.species, key=lambda s: s.id):
                print(f"  species {sp.id}: size {len(sp.members)}, "
                      f"staleness {sp.staleness}, best {sp.best_fitness}")
        return 0
    if query == "record":
        generation = args.generation if args.generation is not None else state.generation - 1
        path = RunPaths(Path(state.config.out_dir)).records_file(generation)
        if not path.exists():
            print(f"no record file {path}")
            return 2
        records = path.read_text().splitlines()
        if not 0 <= args.index < len(records):
            print(f"record {args.index} not found in {path} ({len(records)} records)")
            return 2
        print(records[args.index])
        return 0
    print(f"unknown query {query!r}")
    return 1


def _cmd_export(args: argparse.Namespace) -> int:
    state = load_checkpoint(Path(args.checkpoint))
    if state.best_network is None:
        print("no best network recorded yet")
        return 2
    net = network_from_dict(state.best_network)
    data = export_network(net, args.format)
    if args.output:
        Path(args.output).write_bytes(data)
        print(f"wrote {args.output}")
    else:
        sys.stdout.write(data.decode())
    return 0


def _cmd_worker(args: argparse.Namespace) -> int:
    config = build_config(args)
    host, port = args.connect.rsplit(":", 1)
    evaluator = make_evaluator(config)
    return worker_loop((host, int(port)), evaluator,
                       max_reconnects=args.max_reconnects)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codeepneat",
                                     description="Neuroevolution of layer-graph networks")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="start a new evolution run")
    run.add_argument("--config", help="JSON or YAML config file")
    run.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
    run.add_argument("--seed", type=int, help="run seed (mandatory here or in the config)")
    run.add_argument("--generations", type=int)
    run.add_argument("--workers", type=int, help="local worker threads (0 = in-process)")
    run.add_argument("--listen", help="HOST:PORT for remote workers")
    run.add_argument("--out", help="output directory")
    run.add_argument("--stop-after", type=int, help="stop after N generations (for resume testing)")
    run.set_defaults(fn=_cmd_run)

    resume = sub.add_parser("resume", help="continue a checkpointed run")
    resume.add_argument("checkpoint")
    resume.add_argument("--listen")
    resume.add_argument("--stop-after", type=int)
    resume.set_defaults(fn=_cmd_resume)

    inspect = sub.add_parser("inspect", help="report on a checkpoint")
    inspect.add_argument("checkpoint")
    inspect.add_argument("query", choices=("best", "species", "record"))
    inspect.add_argument("index", nargs="?", type=int, default=0)
    inspect.add_argument("--generation", type=int)
    inspect.set_defaults(fn=_cmd_inspect)

    export = sub.add_parser("export", help="export the best network")
    export.add_argument("checkpoint")
    export.add_argument("--format", choices=("dot", "json"), default="dot")
    export.add_argument("--output", "-o")
    export.set_defaults(fn=_cmd_export)

    worker = sub.add_parser("worker", help="serve evaluations for a remote master")
    worker.add_argument("--connect", required=True, help="HOST:PORT of the master")
    worker.add_argument("--config", help="config file naming the evaluator")
    worker.add_argument("--preset", choices=sorted(PRESETS))
    worker.add_argument("--seed", type=int, default=1)
    worker.add_argument("--max-reconnects", type=int, default=None)
    worker.set_defaults(fn=_cmd_worker)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("CODEEPNEAT_LOG", "WARNING"))
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, KeyError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure; checkpoints are already on disk
        logger.exception("run failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
