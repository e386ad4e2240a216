"""Closed-loop adversarial robustness pipeline for small MNIST classifiers.

FGSM attacks a served model, an accuracy monitor compares against the stored
clean baseline, and a triggered PGD adversarial fine-tuning stage produces a
hardened replacement.
"""

from .attack import AttackConfig, build_adversarial_dataset, fgsm_perturb
from .data import (LabeledDataset, Provenance, load_idx, make_synthetic, registry_get,
                   registry_list, registry_put)
from .defense import DefenseConfig, adversarial_train, pgd_perturb, project_linf
from .monitor import MonitorReport, check_degradation, evaluate_accuracy
from .nn import (Architecture, Model, TrainConfig, adam_step, build_model, forward,
                 loss_and_input_grad, train)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "build_adversarial_dataset", "fgsm_perturb",
    "LabeledDataset", "Provenance", "load_idx", "make_synthetic",
    "registry_get", "registry_list", "registry_put",
    "DefenseConfig", "adversarial_train", "pgd_perturb", "project_linf",
    "MonitorReport", "check_degradation", "evaluate_accuracy",
    "Architecture", "Model", "TrainConfig", "adam_step", "build_model", "forward",
    "loss_and_input_grad", "train",
]
