"""Neuroevolution of deep-network topologies, components, and hyperparameters
through cooperative coevolution of blueprint and module populations."""

from .assembly import AssembledNetwork, AssemblyError, MergePolicy, assemble, assemble_chromosome
from .config import ConfigError, EvolutionConfig
from .coevolution import AssemblyRecord, CoPopulations, attribute_fitness, sample_assemblies
from .evaluator import EvaluationBudget, FitnessReport, SurrogateEvaluator, TrainerEvaluator
from .genome import (
    BlueprintChromosome,
    InnovationRegistry,
    ModuleChromosome,
    compatibility_distance,
    crossover,
    minimal_chromosome,
)
from .hyperparams import HyperparameterSpace, HyperparameterSpec, HyperparameterTable
from .presets import PRESETS, preset_config
from .speciation import Population, Species, allocate_offspring, reproduce, speciate

__version__ = "0.1.0"
