"""Hyperparameter schemas, concrete value tables, and the variation operators on them.

A space declares typed, range-bounded parameters in two namespaces: per-node
parameters (attached to every layer gene) and global parameters (attached to a
whole chromosome). Tables are concrete assignments. All operators take an
explicit ``random.Random`` stream and are pure, so results are reproducible
and safe to compute from concurrent workers.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

KINDS = ("real", "integer", "binary", "categorical")


class SpecMismatchError(ValueError):
    """Two tables built against different schemas were combined."""


@dataclass(frozen=True)
class HyperparameterSpec:
    """Schema for one evolvable parameter.

    ``low``/``high`` bound real and integer kinds (closed interval);
    ``choices`` lists categorical values. ``sigma_fraction`` scales the
    Gaussian mutation step as a fraction of the range width.
    """

    name: str
    kind: str
    low: float = 0.0
    high: float = 0.0
    choices: tuple[Any, ...] = ()
    sigma_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown parameter kind {self.kind!r}")
        if self.kind in ("real", "integer"):
            if self.low > self.high:
                raise ValueError(f"{self.name}: empty range [{self.low}, {self.high}]")
            if not 0.0 < self.sigma_fraction <= 1.0:
                raise ValueError(f"{self.name}: sigma_fraction must be in (0, 1]")
        if self.kind == "categorical" and not self.choices:
            raise ValueError(f"{self.name}: categorical parameter needs at least one choice")

    @property
    def width(self) -> float:
        return float(self.high) - float(self.low)

    def contains(self, value: Any) -> bool:
        if self.kind == "real":
            return isinstance(value, (int, float)) and self.low <= value <= self.high
        if self.kind == "integer":
            return isinstance(value, int) and not isinstance(value, bool) and self.low <= value <= self.high
        if self.kind == "binary":
            return isinstance(value, bool)
        return value in self.choices

    def sample(self, rng: random.Random) -> Any:
        if self.kind == "real":
            return rng.uniform(float(self.low), float(self.high))
        if self.kind == "integer":
            return rng.randint(int(self.low), int(self.high))
        if self.kind == "binary":
            return rng.random() < 0.5
        return rng.choice(self.choices)

    def mutate(self, value: Any, rng: random.Random) -> Any:
        """One mutation step: Gaussian jitter for numeric kinds (clamped to the
        range), bit flip for binary, uniform resample over the other values for
        categorical."""
        if self.kind == "real":
            step = rng.gauss(0.0, self.sigma_fraction * self.width)
            return min(float(self.high), max(float(self.low), value + step))
        if self.kind == "integer":
            step = rng.gauss(0.0, self.sigma_fraction * self.width)
            return min(int(self.high), max(int(self.low), int(round(value + step))))
        if self.kind == "binary":
            return not value
        others = tuple(c for c in self.choices if c != value)
        if not others:  # singleton categorical is forced
            return value
        return rng.choice(others)

    def distance(self, a: Any, b: Any) -> float:
        """Normalized disagreement in [0, 1]."""
        if self.kind in ("real", "integer"):
            if self.width == 0.0:
                return 0.0
            return abs(float(a) - float(b)) / self.width
        return 0.0 if a == b else 1.0


@dataclass(frozen=True)
class HyperparameterSpace:
    """Node-level and network-level parameter schemas plus the layer-kind
    vocabulary new hidden layers draw from. Node and global namespaces must
    not overlap."""

    node_params: tuple[HyperparameterSpec, ...] = ()
    global_params: tuple[HyperparameterSpec, ...] = ()
    layer_kinds: tuple[str, ...] = ("dense",)

    def __post_init__(self) -> None:
        node_names = [s.name for s in self.node_params]
        global_names = [s.name for s in self.global_params]
        for names, where in ((node_names, "node"), (global_names, "global")):
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {where} parameter names: {names}")
        overlap = set(node_names) & set(global_names)
        if overlap:
            raise ValueError(f"node/global namespaces overlap: {sorted(overlap)}")
        if not self.layer_kinds:
            raise ValueError("at least one layer kind is required")


@dataclass(frozen=True)
class HyperparameterTable:
    """Concrete assignment for one list of specs: exactly those names, every
    value inside its spec's range or choice list."""

    specs: tuple[HyperparameterSpec, ...]
    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = {s.name for s in self.specs}
        extra = set(self.values) - names
        missing = names - set(self.values)
        if extra or missing:
            raise ValueError(f"table/spec name mismatch: extra={sorted(extra)} missing={sorted(missing)}")
        for spec in self.specs:
            if not spec.contains(self.values[spec.name]):
                raise ValueError(f"{spec.name}: value {self.values[spec.name]!r} outside spec")

    def __getitem__(self, name: str) -> Any:
        return self.values[name]


def _require_shared_specs(a: HyperparameterTable, b: HyperparameterTable) -> None:
    if a.specs != b.specs:
        raise SpecMismatchError("tables come from different hyperparameter schemas")


def sample_table(specs: tuple[HyperparameterSpec, ...] | list[HyperparameterSpec],
                 rng: random.Random) -> HyperparameterTable:
    """Draw every value uniformly from its range or choice list."""
    specs = tuple(specs)
    return HyperparameterTable(specs, {s.name: s.sample(rng) for s in specs})


def mutate_table(table: HyperparameterTable, per_param_rate: float,
                 rng: random.Random) -> HyperparameterTable:
    """Mutate each parameter independently with probability ``per_param_rate``."""
    values = dict(table.values)
    for spec in table.specs:
        if rng.random() < per_param_rate:
            values[spec.name] = spec.mutate(values[spec.name], rng)
    return HyperparameterTable(table.specs, values)


def crossover_tables(a: HyperparameterTable, b: HyperparameterTable,
                     rng: random.Random) -> HyperparameterTable:
    """Per-parameter uniform pick from either parent (no averaging, so discrete
    values stay attainable)."""
    _require_shared_specs(a, b)
    values = {}
    for spec in a.specs:
        source = a if rng.random() < 0.5 else b
        values[spec.name] = source.values[spec.name]
    return HyperparameterTable(a.specs, values)


def table_distance(a: HyperparameterTable, b: HyperparameterTable) -> float:
    """Mean per-parameter disagreement, normalized into [0, 1]. A pseudo-metric:
    symmetric, zero iff the tables are equal."""
    _require_shared_specs(a, b)
    if not a.specs:
        return 0.0
    total = sum(spec.distance(a.values[spec.name], b.values[spec.name]) for spec in a.specs)
    return total / len(a.specs)


# Serialization (config files, presets, checkpoints).

def spec_to_dict(spec: HyperparameterSpec) -> dict[str, Any]:
    d: dict[str, Any] = {"name": spec.name, "kind": spec.kind}
    if spec.kind in ("real", "integer"):
        d["range"] = [spec.low, spec.high]
        d["sigma_fraction"] = spec.sigma_fraction
    elif spec.kind == "categorical":
        d["choices"] = list(spec.choices)
    return d


def spec_from_dict(d: dict[str, Any]) -> HyperparameterSpec:
    kind = d["kind"]
    if kind in ("real", "integer"):
        low, high = d["range"]
        return HyperparameterSpec(d["name"], kind, low=low, high=high,
                                  sigma_fraction=d.get("sigma_fraction", 0.1))
    if kind == "categorical":
        return HyperparameterSpec(d["name"], kind, choices=tuple(d["choices"]))
    return HyperparameterSpec(d["name"], kind)


def space_to_dict(space: HyperparameterSpace) -> dict[str, Any]:
    return {
        "node_params": [spec_to_dict(s) for s in space.node_params],
        "global_params": [spec_to_dict(s) for s in space.global_params],
        "layer_kinds": list(space.layer_kinds),
    }


def space_from_dict(d: dict[str, Any]) -> HyperparameterSpace:
    return HyperparameterSpace(
        node_params=tuple(spec_from_dict(s) for s in d.get("node_params", [])),
        global_params=tuple(spec_from_dict(s) for s in d.get("global_params", [])),
        layer_kinds=tuple(d.get("layer_kinds", ("dense",))),
    )
