"""FGSM evasion attack and adversarial dataset construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, Provenance, quantize_toward
from .errors import ValidationError
from .nn import Model, loss_and_input_grad

ATTACK_BATCH_SIZE = 256


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.25
    clip_min: float = 0.0
    clip_max: float = 1.0
    seed: int = 0  # unused by FGSM

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValidationError(f"attack epsilon must be in (0, 1], got {self.epsilon}")
        if not self.clip_min < self.clip_max:
            raise ValidationError("clip_min must be smaller than clip_max")


def fgsm_perturb(model: Model, batch, labels, cfg: AttackConfig) -> np.ndarray:
    """``clip(x + eps * sign(grad_x loss), clip_min, clip_max)`` in float64."""
    x = np.asarray(batch, dtype=np.float64)
    if x.size and (x.min() < cfg.clip_min or x.max() > cfg.clip_max):
        raise ValidationError("batch values fall outside [clip_min, clip_max]")
    _, grad = loss_and_input_grad(model, x, labels)
    return np.clip(x + cfg.epsilon * np.sign(grad), cfg.clip_min, cfg.clip_max)


def build_adversarial_dataset(model: Model, clean: LabeledDataset, cfg: AttackConfig,
                              name: str | None = None, version: str | None = None,
                              batch_size: int = ATTACK_BATCH_SIZE) -> LabeledDataset:
    """Perturb every sample of ``clean`` with FGSM against ``model``.

    Batches are processed in dataset order. Pixels are stored as float32,
    rounded toward the clean pixel so the L-inf bound still holds.
    """
    if clean.provenance is not Provenance.CLEAN:
        raise ValidationError(f"refusing to attack non-clean dataset {clean.ref}")
    out = np.empty_like(clean.images)
    for start in range(0, len(clean), batch_size):
        sl = slice(start, start + batch_size)
        adv = fgsm_perturb(model, clean.images[sl], clean.labels[sl], cfg)
        out[sl] = quantize_toward(adv, clean.images[sl])
    return LabeledDataset(out, clean.labels.copy(), name or f"{clean.name}-adv",
                          version or f"fgsm-eps{cfg.epsilon:g}", Provenance.ADVERSARIAL)
