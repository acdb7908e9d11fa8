"""Run configuration: one validated record covering populations, rates,
speciation, evaluation, and output. The seed is mandatory so every run is
reproducible; there is no wall-clock default."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

from .genome import MutationRates
from .hyperparams import HyperparameterSpace, space_from_dict, space_to_dict

ALGORITHMS = ("codeepneat", "deepneat")
EVALUATORS = ("surrogate", "trainer")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class EvolutionConfig:
    seed: int
    space: HyperparameterSpace
    algorithm: str = "codeepneat"
    preset: str | None = None

    blueprint_population: int = 25
    module_population: int = 45
    assembly_count: int = 100
    generations: int = 30

    rates: MutationRates = MutationRates()
    compat_threshold: float = 0.6
    compat_coeffs: tuple[float, float, float] = (1.0, 1.0, 0.4)
    elitism: int = 1
    truncation_fraction: float = 0.5
    staleness_limit: int = 15

    evaluator: str = "surrogate"
    epochs: int = 8
    sample_cap: int = 0
    task: str = "two_gaussians"
    task_size: int = 400
    surrogate_depth: int = 6
    surrogate_depth_weight: float = 1.0
    surrogate_param_weight: float = 0.0
    surrogate_param_targets: dict[str, Any] = field(default_factory=dict)

    merge_method: str = "concatenate"
    downsample: str = "max_pool"
    input_size: tuple[int, ...] = (16,)

    checkpoint_every: int = 5
    workers: int = 0
    out_dir: str = "runs/run"

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}")
        if self.evaluator not in EVALUATORS:
            raise ConfigError("evaluator", f"must be one of {EVALUATORS}")
        for name in ("blueprint_population", "module_population", "assembly_count",
                     "generations", "elitism", "epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("parameter", "add_node", "add_edge", "toggle_connection",
                     "skip_connection", "pointer_resample"):
            rate = getattr(self.rates, name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"rates.{name}", "must lie in [0, 1]")
        if not 0.0 <= self.truncation_fraction < 1.0:
            raise ConfigError("truncation_fraction", "must lie in [0, 1)")
        if self.compat_threshold <= 0:
            raise ConfigError("compat_threshold", "must be positive")
        if self.staleness_limit < 1:
            raise ConfigError("staleness_limit", "must be >= 1")
        if self.workers < 0:
            raise ConfigError("workers", "must be >= 0")
        if not self.input_size or any(d < 1 for d in self.input_size):
            raise ConfigError("input_size", "needs positive dimensions")
        known = {s.name for s in self.space.node_params} | {s.name for s in self.space.global_params}
        for name in self.surrogate_param_targets:
            if name not in known:
                raise ConfigError(f"surrogate_param_targets.{name}", "not a parameter of the space")

    @property
    def population(self) -> int:
        """Single-population size used by the deepneat algorithm."""
        return self.module_population


def config_to_dict(config: EvolutionConfig) -> dict[str, Any]:
    return {
        "seed": config.seed,
        "algorithm": config.algorithm,
        "preset": config.preset,
        "space": space_to_dict(config.space),
        "blueprint_population": config.blueprint_population,
        "module_population": config.module_population,
        "assembly_count": config.assembly_count,
        "generations": config.generations,
        "rates": {
            "parameter": config.rates.parameter,
            "add_node": config.rates.add_node,
            "add_edge": config.rates.add_edge,
            "toggle_connection": config.rates.toggle_connection,
            "skip_connection": config.rates.skip_connection,
            "pointer_resample": config.rates.pointer_resample,
        },
        "compat_threshold": config.compat_threshold,
        "compat_coeffs": list(config.compat_coeffs),
        "elitism": config.elitism,
        "truncation_fraction": config.truncation_fraction,
        "staleness_limit": config.staleness_limit,
        "evaluator": config.evaluator,
        "epochs": config.epochs,
        "sample_cap": config.sample_cap,
        "task": config.task,
        "task_size": config.task_size,
        "surrogate_depth": config.surrogate_depth,
        "surrogate_depth_weight": config.surrogate_depth_weight,
        "surrogate_param_weight": config.surrogate_param_weight,
        "surrogate_param_targets": dict(config.surrogate_param_targets),
        "merge_method": config.merge_method,
        "downsample": config.downsample,
        "input_size": list(config.input_size),
        "checkpoint_every": config.checkpoint_every,
        "workers": config.workers,
        "out_dir": config.out_dir,
    }


def config_from_dict(d: dict[str, Any]) -> EvolutionConfig:
    if "seed" not in d or d["seed"] is None:
        raise ConfigError("seed", "is mandatory; runs are reproducible by construction")
    if "space" not in d:
        raise ConfigError("space", "is required (inline or via a preset)")
    rates = d.get("rates", {})
    config = EvolutionConfig(
        seed=int(d["seed"]),
        space=space_from_dict(d["space"]),
        algorithm=d.get("algorithm", "codeepneat"),
        preset=d.get("preset"),
        blueprint_population=int(d.get("blueprint_population", 25)),
        module_population=int(d.get("module_population", 45)),
        assembly_count=int(d.get("assembly_count", 100)),
        generations=int(d.get("generations", 30)),
        rates=MutationRates(
            parameter=float(rates.get("parameter", 0.3)),
            add_node=float(rates.get("add_node", 0.05)),
            add_edge=float(rates.get("add_edge", 0.1)),
            toggle_connection=float(rates.get("toggle_connection", 0.1)),
            skip_connection=float(rates.get("skip_connection", 0.1)),
            pointer_resample=float(rates.get("pointer_resample", 0.1)),
        ),
        compat_threshold=float(d.get("compat_threshold", 0.6)),
        compat_coeffs=tuple(d.get("compat_coeffs", (1.0, 1.0, 0.4))),
        elitism=int(d.get("elitism", 1)),
        truncation_fraction=float(d.get("truncation_fraction", 0.5)),
        staleness_limit=int(d.get("staleness_limit", 15)),
        evaluator=d.get("evaluator", "surrogate"),
        epochs=int(d.get("epochs", 8)),
        sample_cap=int(d.get("sample_cap", 0)),
        task=d.get("task", "two_gaussians"),
        task_size=int(d.get("task_size", 400)),
        surrogate_depth=int(d.get("surrogate_depth", 6)),
        surrogate_depth_weight=float(d.get("surrogate_depth_weight", 1.0)),
        surrogate_param_weight=float(d.get("surrogate_param_weight", 0.0)),
        surrogate_param_targets=dict(d.get("surrogate_param_targets", {})),
        merge_method=d.get("merge_method", "concatenate"),
        downsample=d.get("downsample", "max_pool"),
        input_size=tuple(int(x) for x in d.get("input_size", (16,))),
        checkpoint_every=int(d.get("checkpoint_every", 5)),
        workers=int(d.get("workers", 0)),
        out_dir=d.get("out_dir", "runs/run"),
    )
    config.validate()
    return config


def with_overrides(config: EvolutionConfig, **overrides: Any) -> EvolutionConfig:
    updated = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    updated.validate()
    return updated
