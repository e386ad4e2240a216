import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advloop.data import LabeledDataset
from advloop.errors import ValidationError
from advloop.monitor import MonitorReport, check_degradation, evaluate_accuracy
from advloop.nn import zero_model


def test_threshold_examples():
    assert check_degradation(0.990, 0.935).triggered
    assert check_degradation(0.990, 0.935).drop_points == pytest.approx(5.5)
    boundary = check_degradation(0.990, 0.940)
    assert boundary.drop_points == 5.0
    assert not boundary.triggered
    better = check_degradation(0.90, 0.95)
    assert better.drop_points < 0 and not better.triggered


@pytest.mark.parametrize("b,o", [(1.2, 0.5), (0.5, -0.1), (float("nan"), 0.5)])
def test_accuracy_range_is_validated(b, o):
    with pytest.raises(ValidationError):
        check_degradation(b, o)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 20))
def test_report_invariants_and_monotonicity(base, a1, a2, threshold):
    lo, hi = sorted((a1, a2))
    r_lo = check_degradation(base, lo, threshold)
    r_hi = check_degradation(base, hi, threshold)
    for r in (r_lo, r_hi):
        assert r.triggered == (r.drop_points > r.threshold_points)
        assert abs(r.drop_points - 100 * (r.baseline_accuracy - r.observed_accuracy)) <= 1e-9
    if r_hi.triggered:
        assert r_lo.triggered
    assert check_degradation(base, lo, threshold).triggered == r_lo.triggered


def test_report_serialises_to_flat_json():
    r = check_degradation(0.99, 0.5, evaluated_on={"name": "d", "version": "1"})
    obj = json.loads(json.dumps(r.to_json()))
    assert set(obj) == {"baseline_accuracy", "observed_accuracy", "drop_points",
                        "threshold_points", "triggered", "evaluated_on", "timestamp"}
    assert MonitorReport.from_json(obj) == r


def _one_hot_model(labels_for_images):
    """MLP whose hidden unit i fires only on image i and votes for its label."""
    n = len(labels_for_images)
    model = zero_model("MLP", hidden=n)
    for i, y in enumerate(labels_for_images):
        model.layers[0].weight[i, i] = 1.0
        model.layers[1].weight[i, y] = 10.0
    return model


def test_perfect_model_scores_one():
    labels = [3, 1, 4, 1, 5]
    images = np.zeros((5, 1, 28, 28))
    for i in range(5):
        images[i].flat[i] = 1.0
    ds = LabeledDataset(images, labels)
    assert evaluate_accuracy(_one_hot_model(labels), ds) == 1.0


def test_zero_model_predicts_class_zero(blobs10):
    frac0 = float(np.mean(blobs10.labels == 0))
    assert evaluate_accuracy(zero_model("MLP", hidden=4), blobs10) == frac0


def test_shard_weighted_average_matches_single_pass(blobs10):
    from advloop.nn import build_model

    model = build_model("MLP", seed=4, hidden=8)
    full = evaluate_accuracy(model, blobs10)
    cut = 73
    a = evaluate_accuracy(model, blobs10.subset(range(cut)))
    b = evaluate_accuracy(model, blobs10.subset(range(cut, len(blobs10))))
    assert (a * cut + b * (len(blobs10) - cut)) / len(blobs10) == pytest.approx(full, abs=1e-15)
    assert evaluate_accuracy(model, blobs10, batch_size=7) == full
