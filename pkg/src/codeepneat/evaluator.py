"""Fitness evaluation: the evaluator contract, a deterministic structural
surrogate, and a small dense-network trainer for synthetic tasks.

The surrogate scores a network by how closely its depth and hyperparameters
match a structural target; it is a pure function used to exercise evolution
dynamics without training. The reference trainer supports dense layers plus
sum/concat merges and bottlenecks, trains with mini-batch SGD + momentum, and
returns validation accuracy as fitness. Convolutional and recurrent layers are
deliberately out of its reach: such networks are scored structurally or
exported for external training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .assembly import REAL_KINDS, AssembledNetwork, network_depth

TRAINER_KINDS = frozenset({"input", "output", "identity", "dense", "merge", "bottleneck"})

FITNESS_FLOOR = 0.0


class UnsupportedLayerError(ValueError):
    """The network contains a layer kind this evaluator cannot execute."""


@dataclass(frozen=True)
class EvaluationBudget:
    """Evaluation effort: training epochs, an optional cap on training samples
    (0 means uncapped), and the seed that makes the run reproducible."""

    epochs: int
    sample_cap: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("budget needs at least one epoch")


@dataclass
class FitnessReport:
    network_id: str
    fitness: float
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not math.isfinite(self.fitness):
            raise ValueError("fitness must be finite")


class Evaluator(Protocol):
    deterministic: bool
    supported_kinds: frozenset[str] | None

    def evaluate(self, net: AssembledNetwork, budget: EvaluationBudget) -> FitnessReport: ...


def _network_id(net: AssembledNetwork) -> str:
    if net.provenance and "network_id" in net.provenance:
        return net.provenance["network_id"]
    return "adhoc"


# ---------------------------------------------------------------------------
# Structural surrogate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StructuralTarget:
    """Target structure: preferred depth plus per-hyperparameter targets.

    ``param_targets`` maps a parameter name to (target value, scale); numeric
    errors are normalized by the scale (their range width), categorical and
    binary targets count 0/1 disagreement.
    """

    depth: int
    depth_weight: float = 1.0
    param_weight: float = 0.0
    param_targets: dict[str, tuple[Any, float | None]] = field(default_factory=dict)


def _param_error(target_value: Any, scale: float | None, values: list[Any]) -> float:
    if not values:
        return 1.0  # parameter absent entirely counts as a full miss
    errs = []
    for v in values:
        if scale is None:
            errs.append(0.0 if v == target_value else 1.0)
        else:
            errs.append(((float(v) - float(target_value)) / scale) ** 2 if scale else 0.0)
    return math.fsum(errs) / len(errs)


def surrogate_fitness(net: AssembledNetwork, target: StructuralTarget) -> FitnessReport:
    """exp(-(w_d * depth_error^2 + w_p * sum of normalized parameter errors)).

    Deterministic, in (0, 1], and exactly 1.0 on a perfect structural match.
    """
    depth = network_depth(net)
    penalty = target.depth_weight * float(depth - target.depth) ** 2
    param_errors: dict[str, float] = {}
    for name, (value, scale) in sorted(target.param_targets.items()):
        layer_values = [l.params[name] for l in net.layers
                        if l.kind in REAL_KINDS and name in l.params]
        if name in net.globals:
            layer_values = layer_values + [net.globals[name]]
        err = _param_error(value, scale, layer_values)
        param_errors[name] = err
        penalty += target.param_weight * err
    fitness = math.exp(-penalty)
    return FitnessReport(_network_id(net), fitness,
                         {"depth": depth, "param_errors": param_errors})


class SurrogateEvaluator:
    """Deterministic structural oracle; ignores the budget."""

    deterministic = True
    supported_kinds: frozenset[str] | None = None

    def __init__(self, target: StructuralTarget):
        self.target = target

    def evaluate(self, net: AssembledNetwork, budget: EvaluationBudget) -> FitnessReport:
        return surrogate_fitness(net, self.target)


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTask:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    input_size: tuple[int, ...]
    n_classes: int


VALIDATION_FRACTION = 0.15  # same train/validation ratio as an 85/15 split


def synthetic_task(kind: str, n: int, seed: int) -> SyntheticTask:
    """Deterministic 2-d binary dataset with an 85/15 train/validation split."""
    if n < 40:
        raise ValueError("need at least 40 samples")
    rng = np.random.default_rng(seed)
    half = n // 2
    counts = (n - half, half)
    if kind == "two_gaussians":
        centers = np.array([[-1.5, -1.5], [1.5, 1.5]])
        xs = [rng.normal(centers[cls], 0.6, size=(count, 2)) for cls, count in enumerate(counts)]
    elif kind == "xor_grid":
        quadrants = np.array([[1.5, 1.5], [-1.5, -1.5], [1.5, -1.5], [-1.5, 1.5]])
        xs = []
        for cls, count in enumerate(counts):
            own = quadrants # first two quadrants are class 0, last two class 1
            picks = rng.integers(0, 2, size=count) + (0 if cls == 0 else 2)
            xs.append(own[picks] + rng.normal(0.0, 0.4, size=(count, 2)))
    elif kind == "spirals":
        xs = []
        for cls, count in enumerate(counts):
            t = np.linspace(0.25, 2.5 * np.pi, count)
            radius = t / (2.5 * np.pi) * 2.0
            angle = t + cls * np.pi
            arm = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
            xs.append(arm + rng.normal(0.0, 0.08, size=(count, 2)))
    else:
        raise ValueError(f"unknown task kind {kind!r}")

    x = np.concatenate(xs).astype(np.float64)
    y = np.concatenate([np.full(count, cls, dtype=np.int64) for cls, count in enumerate(counts)])
    order = rng.permutation(n)
    x, y = x[order], y[order]
    n_train = int(round(n * (1.0 - VALIDATION_FRACTION)))
    return SyntheticTask(kind, x[:n_train], y[:n_train], x[n_train:], y[n_train:],
                         input_size=(2,), n_classes=2)


# ---------------------------------------------------------------------------
# Reference trainer: forward/backward over the assembled DAG
# ---------------------------------------------------------------------------

def _check_supported(net: AssembledNetwork) -> None:
    bad = sorted({l.kind for l in net.layers} - TRAINER_KINDS)
    if bad:
        raise UnsupportedLayerError(f"reference trainer cannot execute layer kinds {bad}")
    if net.recurrent_edges:
        raise UnsupportedLayerError("reference trainer cannot execute recurrent edges")


def _trainable(net: AssembledNetwork) -> list:
    return [l for l in net.layers if l.kind in ("dense", "bottleneck")]


def _fan_dims(net: AssembledNetwork, layer) -> tuple[int, int]:
    parent = net.parents(layer.id)[0]
    fan_in = int(np.prod(net.layer(parent).output_size))
    fan_out = int(np.prod(layer.output_size))
    return fan_in, fan_out


def _init_params(net: AssembledNetwork, n_classes: int,
                 rng: np.random.Generator) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Weight matrices for every trainable layer plus the classifier head,
    using the initialization scheme named in the network globals."""
    scheme = net.globals.get("weight_initialization", "he_normal")
    params: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def init(fan_in: int, fan_out: int) -> np.ndarray:
        if scheme == "glorot_normal":
            std = math.sqrt(2.0 / (fan_in + fan_out))
        else:
            std = math.sqrt(2.0 / fan_in)
        return rng.normal(0.0, std, size=(fan_in, fan_out))

    for layer in _trainable(net):
        fan_in, fan_out = _fan_dims(net, layer)
        params[layer.id] = (init(fan_in, fan_out), np.zeros(fan_out))
    sink = next(l for l in net.layers if l.kind == "output")
    feat = int(np.prod(sink.output_size))
    params["__head__"] = (init(feat, n_classes), np.zeros(n_classes))
    return params


def _forward(net: AssembledNetwork, params: dict, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Topological forward pass; returns class logits and the activation cache.

    Assembly guarantees every non-merge layer has exactly one parent, so each
    layer reads a single input array (merges combine theirs first).
    """
    acts: dict[str, np.ndarray] = {}
    pre: dict[str, np.ndarray] = {}
    for layer in net.layers:
        parents = net.parents(layer.id)
        if layer.kind == "input":
            acts[layer.id] = x
        elif layer.kind in ("identity", "output"):
            acts[layer.id] = acts[parents[0]]
        elif layer.kind == "merge":
            inputs = [acts[p] for p in parents]
            if layer.params["method"] == "element_wise_sum":
                acts[layer.id] = sum(inputs)
            else:
                acts[layer.id] = np.concatenate(inputs, axis=1)
        elif layer.kind == "bottleneck":
            w, b = params[layer.id]
            acts[layer.id] = acts[parents[0]] @ w + b
        else:  # dense
            w, b = params[layer.id]
            z = acts[parents[0]] @ w + b
            pre[layer.id] = z
            acts[layer.id] = np.maximum(z, 0.0) if layer.params.get("activation", "relu") == "relu" else z
    sink = next(l for l in net.layers if l.kind == "output")
    w, b = params["__head__"]
    logits = acts[sink.id] @ w + b
    return logits, {"acts": acts, "pre": pre, "sink": sink.id}


def _loss_and_grad_logits(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    # Softmax cross-entropy, numerically stabilized.
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = logits.shape[0]
    loss = -float(log_probs[np.arange(n), y].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def _backward(net: AssembledNetwork, params: dict, cache: dict,
              grad_logits: np.ndarray, x: np.ndarray) -> dict:
    acts, pre = cache["acts"], cache["pre"]
    grads = {k: (np.zeros_like(w), np.zeros_like(b)) for k, (w, b) in params.items()}
    upstream: dict[str, np.ndarray] = {lid: np.zeros_like(a) for lid, a in acts.items()}

    w_head, _ = params["__head__"]
    head_in = acts[cache["sink"]]
    grads["__head__"] = (head_in.T @ grad_logits, grad_logits.sum(axis=0))
    upstream[cache["sink"]] += grad_logits @ w_head.T

    for layer in reversed(net.layers):
        g = upstream[layer.id]
        parents = net.parents(layer.id)
        if layer.kind == "input":
            continue
        if layer.kind in ("identity", "output"):
            upstream[parents[0]] += g
        elif layer.kind == "merge":
            if layer.params["method"] == "element_wise_sum":
                for p in parents:
                    upstream[p] += g
            else:
                offset = 0
                for p in parents:
                    width = acts[p].shape[1]
                    upstream[p] += g[:, offset:offset + width]
                    offset += width
        elif layer.kind == "bottleneck":
            w, _ = params[layer.id]
            grads[layer.id] = (acts[parents[0]].T @ g, g.sum(axis=0))
            upstream[parents[0]] += g @ w.T
        else:  # dense
            if layer.params.get("activation", "relu") == "relu":
                g = g * (pre[layer.id] > 0.0)
            w, _ = params[layer.id]
            grads[layer.id] = (acts[parents[0]].T @ g, g.sum(axis=0))
            upstream[parents[0]] += g @ w.T
    return grads


def train_and_score(net: AssembledNetwork, task: SyntheticTask,
                    budget: EvaluationBudget, *, batch_size: int = 32) -> FitnessReport:
    """Train with mini-batch SGD + momentum using the network's evolved global
    hyperparameters, then report validation accuracy as fitness. Divergence
    (non-finite loss) floors fitness at 0.0 instead of raising."""
    _check_supported(net)
    rng = np.random.default_rng(budget.seed)
    params = _init_params(net, task.n_classes, rng)

    lr = float(net.globals.get("learning_rate", 0.01))
    momentum = float(net.globals.get("momentum", 0.9))
    nesterov = bool(net.globals.get("nesterov", False))

    x_train, y_train = task.x_train, task.y_train
    if budget.sample_cap and len(x_train) > budget.sample_cap:
        x_train, y_train = x_train[:budget.sample_cap], y_train[:budget.sample_cap]

    velocity = {k: (np.zeros_like(w), np.zeros_like(b)) for k, (w, b) in params.items()}
    curve: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):  # divergence floors below
        for _ in range(budget.epochs):
            order = rng.permutation(len(x_train))
            epoch_losses: list[float] = []
            for start in range(0, len(order), batch_size):
                batch = order[start:start + batch_size]
                logits, cache = _forward(net, params, x_train[batch])
                loss, grad_logits = _loss_and_grad_logits(logits, y_train[batch])
                if not math.isfinite(loss):
                    return FitnessReport(_network_id(net), FITNESS_FLOOR,
                                         {"divergent": True, "loss_curve": curve})
                grads = _backward(net, params, cache, grad_logits, x_train[batch])
                for key, (w, b) in params.items():
                    gw, gb = grads[key]
                    vw, vb = velocity[key]
                    vw = momentum * vw - lr * gw
                    vb = momentum * vb - lr * gb
                    velocity[key] = (vw, vb)
                    if nesterov:
                        params[key] = (w + momentum * vw - lr * gw, b + momentum * vb - lr * gb)
                    else:
                        params[key] = (w + vw, b + vb)
                epoch_losses.append(loss)
            curve.append(math.fsum(epoch_losses) / len(epoch_losses))

    logits, _ = _forward(net, params, task.x_val)
    accuracy = float((logits.argmax(axis=1) == task.y_val).mean())
    n_params = sum(w.size + b.size for w, b in params.values())
    return FitnessReport(_network_id(net), accuracy,
                         {"loss_curve": curve, "parameter_count": n_params,
                          "train_samples": len(x_train)})


def gradient_check(net: AssembledNetwork, task: SyntheticTask,
                   perturbation: float = 1e-5, *, seed: int = 0,
                   batch: int = 16) -> float:
    """Max relative error between backprop and central finite differences over
    every parameter, on a small batch. The verification oracle for the trainer."""
    _check_supported(net)
    rng = np.random.default_rng(seed)
    params = _init_params(net, task.n_classes, rng)
    # Evaluate at a generic point: zero biases park pre-activations exactly on
    # the relu kink, where central differences are legitimately undefined.
    for w, b in params.values():
        w += rng.uniform(-0.05, 0.05, w.shape)
        b += rng.uniform(-0.05, 0.05, b.shape)
    x = task.x_train[:batch]
    y = task.y_train[:batch]

    logits, cache = _forward(net, params, x)
    _, grad_logits = _loss_and_grad_logits(logits, y)
    analytic = _backward(net, params, cache, grad_logits, x)

    def loss_at() -> float:
        out, _ = _forward(net, params, x)
        return _loss_and_grad_logits(out, y)[0]

    worst = 0.0
    for key, (w, b) in params.items():
        for arr, grad in ((w, analytic[key][0]), (b, analytic[key][1])):
            flat = arr.ravel()
            gflat = grad.ravel()
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + perturbation
                up = loss_at()
                flat[i] = keep - perturbation
                down = loss_at()
                flat[i] = keep
                numeric = (up - down) / (2.0 * perturbation)
                denom = max(abs(gflat[i]) + abs(numeric), 1e-8)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


class TrainerEvaluator:
    """Reference trainer behind the evaluator contract."""

    deterministic = True
    supported_kinds: frozenset[str] | None = TRAINER_KINDS

    def __init__(self, task: SyntheticTask):
        self.task = task

    def evaluate(self, net: AssembledNetwork, budget: EvaluationBudget) -> FitnessReport:
        return train_and_score(net, self.task, budget)
