"""Built-in run presets.

`cifar10`, `lstm-ptb`, and `captioning` carry the published search spaces and
run constants for the image-classification, language-modeling, and captioning
domains; at desk scale they run under the structural surrogate (real training
happens through the JSON export and an external evaluator). `surrogate-demo`
and `deepneat-gaussians` are the self-contained demonstration configs the
acceptance suite exercises.
"""

from __future__ import annotations

from .config import EvolutionConfig
from .hyperparams import HyperparameterSpace, HyperparameterSpec

DEFAULT_SEED = 1


def _real(name: str, low: float, high: float) -> HyperparameterSpec:
    return HyperparameterSpec(name, "real", low=low, high=high)


def _integer(name: str, low: int, high: int) -> HyperparameterSpec:
    return HyperparameterSpec(name, "integer", low=low, high=high)


def _binary(name: str) -> HyperparameterSpec:
    return HyperparameterSpec(name, "binary")


def _categorical(name: str, *choices) -> HyperparameterSpec:
    return HyperparameterSpec(name, "categorical", choices=tuple(choices))


def cifar10_space() -> HyperparameterSpace:
    return HyperparameterSpace(
        node_params=(
            _integer("filters", 32, 256),
            _real("dropout", 0.0, 0.7),
            _real("weight_scaling", 0.0, 2.0),
            _categorical("kernel_size", 1, 3),
            _binary("max_pooling"),
        ),
        global_params=(
            _real("learning_rate", 0.0001, 0.1),
            _real("momentum", 0.68, 0.99),
            _real("hue_shift", 0.0, 45.0),
            _real("sv_shift", 0.0, 0.5),
            _real("sv_scale", 0.0, 0.5),
            _integer("cropped_image_size", 26, 32),
            _real("spatial_scaling", 0.0, 0.3),
            _binary("horizontal_flips"),
            _binary("variance_normalization"),
            _binary("nesterov"),
        ),
        layer_kinds=("conv",),
    )


def lstm_ptb_space() -> HyperparameterSpace:
    # Language-modeling run constants, shipped as singleton ranges.
    return HyperparameterSpace(
        node_params=(
            _integer("hidden_size", 650, 650),
            _real("dropout", 0.5, 0.5),
        ),
        global_params=(
            _real("learning_rate_decay", 0.8, 0.8),
            _integer("decay_period_epochs", 6, 6),
            _integer("unroll_steps", 35, 35),
            _integer("batch_size", 20, 20),
            _real("gradient_clip_norm", 5.0, 5.0),
            _real("initial_weight_range", 0.05, 0.05),
        ),
        layer_kinds=("lstm",),
    )


def captioning_space() -> HyperparameterSpace:
    return HyperparameterSpace(
        node_params=(
            _categorical("merge_method", "sum", "concat"),
            _categorical("size", 128, 256),
            _categorical("activation", "relu", "linear"),
            _real("dropout", 0.0, 0.7),
        ),
        global_params=(
            _real("learning_rate", 0.0001, 0.1),
            _real("momentum", 0.68, 0.99),
            _integer("shared_embedding_size", 128, 512),
            _real("embedding_dropout", 0.0, 0.7),
            _binary("lstm_recurrent_dropout"),
            _binary("nesterov"),
            _categorical("weight_initialization", "glorot_normal", "he_normal"),
        ),
        layer_kinds=("dense", "lstm"),
    )


def surrogate_demo_space() -> HyperparameterSpace:
    return HyperparameterSpace(
        node_params=(
            _integer("size", 4, 256),
            _real("dropout", 0.0, 0.7),
            _categorical("activation", "relu", "linear"),
        ),
        global_params=(
            _real("learning_rate", 0.0001, 0.1),
            _real("momentum", 0.68, 0.99),
        ),
        layer_kinds=("dense",),
    )


def gaussians_space() -> HyperparameterSpace:
    return HyperparameterSpace(
        node_params=(
            _integer("size", 2, 48),
            _categorical("activation", "relu", "linear"),
        ),
        global_params=(
            _real("learning_rate", 0.001, 0.1),
            _real("momentum", 0.5, 0.95),
            _binary("nesterov"),
            _categorical("weight_initialization", "he_normal", "glorot_normal"),
        ),
        layer_kinds=("dense",),
    )


def _cifar10(seed: int) -> EvolutionConfig:
    return EvolutionConfig(
        seed=seed, space=cifar10_space(), preset="cifar10",
        blueprint_population=25, module_population=45, assembly_count=100,
        generations=72, epochs=8,
        merge_method="concatenate", downsample="max_pool",
        input_size=(3, 32, 32), out_dir="runs/cifar10",
    )


def _lstm_ptb(seed: int) -> EvolutionConfig:
    return EvolutionConfig(
        seed=seed, space=lstm_ptb_space(), preset="lstm-ptb",
        algorithm="deepneat", module_population=50, blueprint_population=1,
        assembly_count=50, generations=25, epochs=39,
        merge_method="element_wise_sum", downsample="dense_bottleneck",
        input_size=(650,), out_dir="runs/lstm-ptb",
        surrogate_depth=2,
    )


def _captioning(seed: int) -> EvolutionConfig:
    return EvolutionConfig(
        seed=seed, space=captioning_space(), preset="captioning",
        blueprint_population=25, module_population=45, assembly_count=100,
        generations=37, epochs=6,
        merge_method="concatenate", downsample="dense_bottleneck",
        input_size=(512,), out_dir="runs/captioning",
    )


def _surrogate_demo(seed: int) -> EvolutionConfig:
    return EvolutionConfig(
        seed=seed, space=surrogate_demo_space(), preset="surrogate-demo",
        blueprint_population=30, module_population=30, assembly_count=60,
        generations=30, evaluator="surrogate",
        surrogate_depth=6, surrogate_depth_weight=1.0, surrogate_param_weight=1.0,
        surrogate_param_targets={"size": 96, "dropout": 0.2,
                                 "learning_rate": 0.05, "momentum": 0.85},
        merge_method="concatenate", downsample="dense_bottleneck",
        input_size=(16,), out_dir="runs/surrogate-demo",
    )


def _deepneat_gaussians(seed: int) -> EvolutionConfig:
    return EvolutionConfig(
        seed=seed, space=gaussians_space(), preset="deepneat-gaussians",
        algorithm="deepneat", module_population=20, blueprint_population=1,
        assembly_count=20, generations=20,
        evaluator="trainer", task="two_gaussians", task_size=400, epochs=8,
        merge_method="concatenate", downsample="dense_bottleneck",
        input_size=(2,), out_dir="runs/deepneat-gaussians",
    )


PRESETS = {
    "cifar10": _cifar10,
    "lstm-ptb": _lstm_ptb,
    "captioning": _captioning,
    "surrogate-demo": _surrogate_demo,
    "deepneat-gaussians": _deepneat_gaussians,
}


def preset_config(name: str, seed: int = DEFAULT_SEED) -> EvolutionConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    config = PRESETS[name](seed)
    config.validate()
    return config
