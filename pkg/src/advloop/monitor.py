"""Accuracy monitoring against the stored clean baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from datetime import datetime, timezone

import numpy as np

from .data import LabeledDataset
from .errors import ValidationError
from .nn import Model, predict

DEFAULT_THRESHOLD_POINTS = 5.0
# drops are rounded to this many decimals so that e.g. 0.990 -> 0.940 is exactly 5.0
_DROP_DECIMALS = 9


@dataclass(frozen=True)
class MonitorReport:
    baseline_accuracy: float
    observed_accuracy: float
    drop_points: float
    threshold_points: float
    triggered: bool
    evaluated_on: dict
    timestamp: str

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "MonitorReport":
        return cls(**payload)


def evaluate_accuracy(model: Model, data: LabeledDataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(data) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    preds = predict(model, data.images, batch_size=batch_size)
    return float(np.count_nonzero(preds == data.labels)) / len(data)


def drop_in_points(baseline_accuracy: float, observed_accuracy: float) -> float:
    return round(100.0 * (baseline_accuracy - observed_accuracy), _DROP_DECIMALS)


def check_degradation(baseline_accuracy: float, observed_accuracy: float,
                      threshold_points: float = DEFAULT_THRESHOLD_POINTS,
                      evaluated_on: dict | None = None,
                      timestamp: str | None = None) -> MonitorReport:
    """Trigger when accuracy fell by strictly more than ``threshold_points``."""
    for label, value in (("baseline", baseline_accuracy), ("observed", observed_accuracy)):
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f"{label} accuracy must lie in [0, 1], got {value}")
    drop = drop_in_points(baseline_accuracy, observed_accuracy)
    return MonitorReport(
        baseline_accuracy=float(baseline_accuracy),
        observed_accuracy=float(observed_accuracy),
        drop_points=drop,
        threshold_points=float(threshold_points),
        triggered=drop > threshold_points,
        evaluated_on=dict(evaluated_on or {}),
        timestamp=timestamp or datetime.now(timezone.utc).isoformat(),
    )
