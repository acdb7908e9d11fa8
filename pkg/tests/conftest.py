import logging
import random

import pytest

from codeepneat.genome import (
    InnovationRegistry,
    minimal_blueprint,
    minimal_chromosome,
    mutate_add_edge,
    mutate_add_node,
    toggle_layer_connection,
)
from codeepneat.hyperparams import HyperparameterSpace, HyperparameterSpec

# The unevaluated-module warnings are expected in small runs; keep test output readable.
logging.getLogger("codeepneat.coevolution").setLevel(logging.ERROR)


def small_space(layer_kinds=("dense",)) -> HyperparameterSpace:
    return HyperparameterSpace(
        node_params=(
            HyperparameterSpec("size", "integer", low=4, high=64),
            HyperparameterSpec("dropout", "real", low=0.0, high=0.7),
            HyperparameterSpec("activation", "categorical", choices=("relu", "linear")),
        ),
        global_params=(
            HyperparameterSpec("learning_rate", "real", low=0.001, high=0.1),
            HyperparameterSpec("nesterov", "binary"),
        ),
        layer_kinds=layer_kinds,
    )


def lstm_space() -> HyperparameterSpace:
    return HyperparameterSpace(
        node_params=(HyperparameterSpec("hidden_size", "integer", low=8, high=64),),
        global_params=(),
        layer_kinds=("lstm",),
    )


def random_module(space, registry, rng, mutations=8):
    """A module chromosome grown by a random walk of structural mutations."""
    c = minimal_chromosome(space, rng)
    for _ in range(mutations):
        op = rng.randrange(3)
        if op == 0:
            c, _ = mutate_add_node(c, registry, rng, space=space)
        elif op == 1:
            c, _ = mutate_add_edge(c, registry, rng)
        else:
            c, _ = toggle_layer_connection(c, rng)
    return c


def random_blueprint(space, species_ids, registry, rng, mutations=5):
    c = minimal_blueprint(space, species_ids, rng)
    for _ in range(mutations):
        op = rng.randrange(3)
        if op == 0:
            c, _ = mutate_add_node(c, registry, rng, species_ids=species_ids)
        elif op == 1:
            c, _ = mutate_add_edge(c, registry, rng)
        else:
            c, _ = toggle_layer_connection(c, rng)
    return c


def find_seed(predicate, start=0, limit=10_000):
    """Smallest seed whose fresh Random stream satisfies the predicate; lets a
    test force a specific stochastic branch deterministically."""
    for seed in range(start, start + limit):
        if predicate(random.Random(seed)):
            return seed
    raise AssertionError("no seed satisfies the predicate")


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def registry():
    return InnovationRegistry()
