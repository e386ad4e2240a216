"""Tiny synthetic workspace shared by the pipeline and CLI tests."""

from advloop.attack import AttackConfig
from advloop.data import make_synthetic, registry_put
from advloop.defense import DefenseConfig
from advloop.nn import TrainConfig
from advloop.orchestrator import ScenarioConfig

TRAIN_REF, EVAL_REF = "syn-train:1", "syn-eval:1"


def seed_workspace(root, n_per_class=40):
    full = make_synthetic(n_per_class, 10, seed=0)
    n_train = int(len(full) * 0.75)
    registry_put(root, full.subset(range(n_train), "syn-train", "1"))
    registry_put(root, full.subset(range(n_train, len(full)), "syn-eval", "1"))
    return root


def tiny_config(attack_eps=0.25, defense_eps=0.25, threshold=5.0) -> ScenarioConfig:
    return ScenarioConfig(
        TRAIN_REF, EVAL_REF,
        train=TrainConfig(4, 1e-3, 32, 0),
        attack=AttackConfig(attack_eps),
        defense=DefenseConfig(epsilon_budget=defense_eps, step_size_alpha=0.05, pgd_steps_k=3,
                              epochs=2, learning_rate=1e-3, batch_size=32),
        threshold_points=threshold, architecture="MLP", hidden=16, seed=0)
