import math
import random

import numpy as np
import pytest

from codeepneat.assembly import MergePolicy, assemble, assemble_chromosome
from codeepneat.evaluator import (
    EvaluationBudget,
    FitnessReport,
    StructuralTarget,
    SurrogateEvaluator,
    TrainerEvaluator,
    UnsupportedLayerError,
    gradient_check,
    surrogate_fitness,
    synthetic_task,
    train_and_score,
)
from codeepneat.genome import minimal_chromosome
from conftest import lstm_space, random_blueprint, random_module, small_space
from test_assembly import chain_blueprint, chain_module, diamond_blueprint

SPACE = small_space()
POLICY = MergePolicy("concatenate", "dense_bottleneck")


def depth_net(depth):
    return assemble_chromosome(chain_module([8] * depth), POLICY, (2,),
                               provenance={"network_id": f"depth{depth}"})


class TestSurrogate:
    def test_exact_match_scores_one(self):
        report = surrogate_fitness(depth_net(4), StructuralTarget(depth=4))
        assert report.fitness == 1.0

    def test_depth_off_by_one_scores_exp_minus_one(self):
        report = surrogate_fitness(depth_net(5), StructuralTarget(depth=4, depth_weight=1.0))
        assert report.fitness == pytest.approx(math.exp(-1.0))

    def test_fitness_strictly_decreases_with_depth_error(self):
        target = StructuralTarget(depth=3)
        scores = [surrogate_fitness(depth_net(d), target).fitness for d in range(3, 9)]
        assert all(a > b for a, b in zip(scores, scores[1:]))

    def test_param_targets_pull_fitness_down(self):
        net = depth_net(3)
        on_target = StructuralTarget(depth=3, param_weight=1.0,
                                     param_targets={"size": (8, 60.0)})
        off_target = StructuralTarget(depth=3, param_weight=1.0,
                                      param_targets={"size": (68, 60.0)})
        assert surrogate_fitness(net, on_target).fitness == 1.0
        assert surrogate_fitness(net, off_target).fitness == pytest.approx(math.exp(-1.0))

    def test_deterministic_and_bounded(self, registry):
        rng = random.Random(0)
        target = StructuralTarget(depth=5, param_weight=0.5,
                                  param_targets={"size": (32, 60.0)})
        for _ in range(50):
            net = assemble_chromosome(random_module(SPACE, registry, rng, rng.randrange(10)),
                                      POLICY, (2,), provenance={"network_id": "d"})
            a = surrogate_fitness(net, target).fitness
            b = surrogate_fitness(net, target).fitness
            assert a == b
            assert 0.0 < a <= 1.0


class TestSyntheticTasks:
    def test_two_gaussians_balance(self):
        task = synthetic_task("two_gaussians", 1000, seed=0)
        labels = np.concatenate([task.y_train, task.y_val])
        assert int((labels == 0).sum()) == 500
        assert int((labels == 1).sum()) == 500

    def test_split_sizes(self):
        task = synthetic_task("two_gaussians", 1000, seed=0)
        assert len(task.x_train) == 850
        assert len(task.x_val) == 150

    def test_same_seed_same_bytes(self):
        a = synthetic_task("spirals", 200, seed=7)
        b = synthetic_task("spirals", 200, seed=7)
        assert a.x_train.tobytes() == b.x_train.tobytes()
        assert a.y_val.tobytes() == b.y_val.tobytes()

    @pytest.mark.parametrize("kind", ["two_gaussians", "xor_grid", "spirals"])
    def test_kinds_produce_two_classes(self, kind):
        task = synthetic_task(kind, 120, seed=3)
        assert set(np.unique(task.y_train)) == {0, 1}

    def test_tiny_dataset_rejected(self):
        with pytest.raises(ValueError):
            synthetic_task("two_gaussians", 10, seed=0)


class TestTrainer:
    def test_linear_task_single_dense_layer_reaches_095(self):
        task = synthetic_task("two_gaussians", 400, seed=1)
        net = assemble_chromosome(chain_module([8]), POLICY, (2,),
                                  provenance={"network_id": "lin"})
        net.globals.update({"learning_rate": 0.05, "momentum": 0.9})
        report = train_and_score(net, task, EvaluationBudget(epochs=50, seed=0))
        assert report.fitness >= 0.95

    def test_zero_epochs_disallowed(self):
        with pytest.raises(ValueError):
            EvaluationBudget(epochs=0)

    def test_same_seed_identical_fitness(self):
        task = synthetic_task("xor_grid", 200, seed=2)
        net = assemble_chromosome(chain_module([16, 8]), POLICY, (2,),
                                  provenance={"network_id": "det"})
        net.globals.update({"learning_rate": 0.05, "momentum": 0.9})
        a = train_and_score(net, task, EvaluationBudget(epochs=5, seed=11))
        b = train_and_score(net, task, EvaluationBudget(epochs=5, seed=11))
        assert a.fitness == b.fitness
        assert a.diagnostics["loss_curve"] == b.diagnostics["loss_curve"]

    def test_unsupported_kind_raises_capability_error(self, rng):
        conv_net = assemble_chromosome(
            minimal_chromosome(small_space(layer_kinds=("conv",)), rng),
            MergePolicy("concatenate", "max_pool"), (3, 8, 8),
            provenance={"network_id": "conv"})
        task = synthetic_task("two_gaussians", 100, seed=0)
        with pytest.raises(UnsupportedLayerError):
            train_and_score(conv_net, task, EvaluationBudget(epochs=1))

    def test_divergence_floors_fitness(self):
        task = synthetic_task("two_gaussians", 100, seed=0)
        net = assemble_chromosome(chain_module([8]), POLICY, (2,),
                                  provenance={"network_id": "boom"})
        net.globals.update({"learning_rate": 1e12, "momentum": 0.99})
        report = train_and_score(net, task, EvaluationBudget(epochs=10, seed=0))
        assert report.fitness == 0.0
        assert report.diagnostics.get("divergent")

    def test_sample_cap_limits_training_data(self):
        task = synthetic_task("two_gaussians", 400, seed=1)
        net = assemble_chromosome(chain_module([4]), POLICY, (2,),
                                  provenance={"network_id": "cap"})
        report = train_and_score(net, task, EvaluationBudget(epochs=1, sample_cap=50, seed=0))
        assert report.diagnostics["train_samples"] == 50

    def test_loss_non_increasing_on_linear_task_small_lr(self):
        task = synthetic_task("two_gaussians", 300, seed=4)
        net = assemble_chromosome(chain_module([8]), POLICY, (2,),
                                  provenance={"network_id": "mono"})
        net.globals.update({"learning_rate": 0.01, "momentum": 0.0})
        report = train_and_score(net, task, EvaluationBudget(epochs=8, seed=5))
        curve = report.diagnostics["loss_curve"]
        assert all(b <= a + 1e-9 for a, b in zip(curve, curve[1:]))

    def test_finiteness_invariant(self):
        with pytest.raises(ValueError):
            FitnessReport("x", float("nan"))


class TestGradientCheck:
    TASK = synthetic_task("xor_grid", 120, seed=6)

    def test_dense_chain(self):
        net = assemble_chromosome(chain_module([12, 8]), POLICY, (2,),
                                  provenance={"network_id": "gc1"})
        assert gradient_check(net, self.TASK, 1e-5) < 1e-4

    def test_sum_merge(self):
        blueprint = diamond_blueprint([1, 2, 3, 1])
        net = assemble(blueprint, {1: chain_module([8]), 2: chain_module([8]),
                                   3: chain_module([8])},
                       MergePolicy("element_wise_sum", "dense_bottleneck"), (2,),
                       provenance={"network_id": "gc2"})
        assert gradient_check(net, self.TASK, 1e-5) < 1e-4

    def test_concat_merge_with_bottleneck(self):
        blueprint = diamond_blueprint([1, 2, 3, 1])
        net = assemble(blueprint, {1: chain_module([8]), 2: chain_module([24]),
                                   3: chain_module([8])}, POLICY, (2,),
                       provenance={"network_id": "gc3"})
        kinds = {l.kind for l in net.layers}
        assert "bottleneck" in kinds and "merge" in kinds and "identity" in kinds
        assert gradient_check(net, self.TASK, 1e-5) < 1e-4

    def test_zero_weight_network_has_symmetric_gradients(self):
        from codeepneat.evaluator import _backward, _forward, _init_params, _loss_and_grad_logits

        net = assemble_chromosome(chain_module([6]), POLICY, (2,),
                                  provenance={"network_id": "sym"})
        # balanced, mirror-symmetric batch on a zero-initialized network
        x = np.array([[1.0, 2.0], [-1.0, -2.0]])
        y = np.array([0, 1])
        params = _init_params(net, 2, np.random.default_rng(0))
        params = {k: (np.zeros_like(w), np.zeros_like(b)) for k, (w, b) in params.items()}
        logits, cache = _forward(net, params, x)
        loss, grad_logits = _loss_and_grad_logits(logits, y)
        grads = _backward(net, params, cache, grad_logits, x)
        gw, gb = grads["__head__"]
        # uniform softmax on a balanced batch: bias gradient cancels exactly
        assert np.allclose(gb, 0.0)
        assert np.allclose(gw, 0.0)  # zero activations feed the head


class TestEvaluatorContract:
    def test_surrogate_evaluator_flags(self):
        ev = SurrogateEvaluator(StructuralTarget(depth=3))
        assert ev.deterministic and ev.supported_kinds is None
        report = ev.evaluate(depth_net(3), EvaluationBudget(epochs=1))
        assert report.fitness == 1.0

    def test_trainer_evaluator_flags(self):
        task = synthetic_task("two_gaussians", 100, seed=0)
        ev = TrainerEvaluator(task)
        assert ev.deterministic
        assert "dense" in ev.supported_kinds and "conv" not in ev.supported_kinds
