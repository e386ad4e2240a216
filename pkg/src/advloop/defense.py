"""PGD inner maximisation and the adversarial fine-tuning loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import LabeledDataset, Provenance
from .errors import ValidationError
from .nn import EpochStats, Model, fit, loss_and_input_grad


@dataclass(frozen=True)
class DefenseConfig:
    epsilon_budget: float = 0.25
    step_size_alpha: float = 0.01
    pgd_steps_k: int = 20
    epochs: int = 20
    learning_rate: float = 0.0001
    random_start: bool = True
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if not 0.0 < self.epsilon_budget <= 1.0:
            raise ValidationError(
                f"epsilon_budget must be in (0, 1], got {self.epsilon_budget}")
        if not self.step_size_alpha > 0:
            raise ValidationError("step_size_alpha must be > 0")
        for field_name in ("pgd_steps_k", "epochs", "batch_size"):
            value = getattr(self, field_name)
            if int(value) != value or value < 1:
                raise ValidationError(f"{field_name} must be an integer >= 1, got {value}")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")


def project_linf(origin, point, epsilon_budget: float) -> np.ndarray:
    """Clamp ``point`` into the L-inf ball of radius eps around ``origin``, then into [0, 1]."""
    origin = np.asarray(origin, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    if origin.shape != point.shape:
        raise ValidationError(f"shape mismatch: {origin.shape} vs {point.shape}")
    return np.clip(np.clip(point, origin - epsilon_budget, origin + epsilon_budget), 0.0, 1.0)


def random_start_noise(shape, epsilon_budget: float, seed: int, stream: int,
                       sample_ids) -> np.ndarray:
    """Uniform(-eps, eps) noise with one RNG stream per (seed, stream, sample id)."""
    per_sample = shape[1:]
    rows = [np.random.default_rng([seed, stream, int(i)]).uniform(
        -epsilon_budget, epsilon_budget, size=per_sample) for i in sample_ids]
    return np.stack(rows).reshape(shape)


def pgd_perturb(model: Model, batch, labels, cfg: DefenseConfig, stream: int = 0,
                sample_ids=None,
                on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """k signed-gradient ascent steps of size alpha, projecting after each one.

    With ``random_start`` the first iterate is the projection of the batch plus
    uniform noise; noise for sample ``i`` comes from ``(seed, stream, i)``.
    ``on_step(t, x_t)`` is called for every iterate including ``x_0``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValidationError("PGD input must lie in [0, 1]")
    eps = cfg.epsilon_budget
    if cfg.random_start:
        ids = np.arange(x.shape[0]) if sample_ids is None else np.asarray(sample_ids)
        x_t = project_linf(x, x + random_start_noise(x.shape, eps, cfg.seed, stream, ids), eps)
    else:
        x_t = x.copy()
    if on_step is not None:
        on_step(0, x_t)
    for t in range(cfg.pgd_steps_k):
        _, grad = loss_and_input_grad(model, x_t, labels)
        x_t = project_linf(x, x_t + cfg.step_size_alpha * np.sign(grad), eps)
        if on_step is not None:
            on_step(t + 1, x_t)
    return x_t


def adversarial_train(base: Model, clean: LabeledDataset,
                      cfg: DefenseConfig) -> tuple[Model, list[EpochStats]]:
    """Fine-tune a copy of ``base`` on fresh PGD examples only.

    Every mini-batch is replaced by PGD examples crafted against the current
    parameters before a single Adam step. Adam state starts from zero.
    Returns the hardened model and per-epoch adversarial loss/accuracy.
    """
    if clean.provenance is not Provenance.CLEAN:
        raise ValidationError(f"adversarial training needs a clean dataset, got {clean.ref}")
    if len(clean) == 0:
        raise ValidationError("cannot train on an empty dataset")

    def craft(model, x, y, sample_ids, epoch):
        return pgd_perturb(model, x, y, cfg, stream=epoch, sample_ids=sample_ids)

    return fit(base.copy(), clean.images, clean.labels, cfg.epochs, cfg.learning_rate,
               cfg.batch_size, cfg.seed, transform=craft, desc="adv-train")
