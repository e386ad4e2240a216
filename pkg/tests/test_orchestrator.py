import csv
import json

import pytest
from hypothesis import given, settings, strategies as st

from advloop.data import registry_get_ref
from advloop.errors import NotFoundError, StateError
from advloop.orchestrator import (CSV_HEADER, TRANSITIONS, EventKind, PipelineState, State,
                                  is_legal, read_events, replay, run_attack, run_defense,
                                  run_grid, run_normal, run_scenario)
from advloop.monitor import evaluate_accuracy
from advloop.volume import Role, volume_list, volume_load
from pipeline_fixtures import seed_workspace, tiny_config

ALL_STATES = list(State)


def test_transition_table():
    assert TRANSITIONS[State.IDLE] == {State.TRAINING_BASELINE}
    assert is_legal(State.SERVING, State.ATTACKED)
    assert not is_legal(State.SERVING, State.DEFENDING)
    assert not is_legal(State.SERVING_HARDENED, State.SERVING)
    for s in ALL_STATES:
        assert is_legal(s, State.FAILED)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(ALL_STATES), max_size=12))
def test_random_transition_sequences_never_reach_illegal_state(targets):
    state = PipelineState(".")
    for target in targets:
        before = state.state
        if target is State.DEFENDING:
            # no trigger was ever emitted, so Defending is always refused
            with pytest.raises(StateError):
                state.enter(target, trigger_id=1)
        elif is_legal(before, target):
            state.enter(target)
            assert state.state is target
        else:
            with pytest.raises(StateError):
                state.enter(target)
            assert state.state is before
    assert replay(state.event_log).state is state.state


def test_defending_requires_unconsumed_trigger():
    state = PipelineState(".")
    for s in (State.TRAINING_BASELINE, State.SERVING, State.ATTACKED):
        state.enter(s)
    state.append(EventKind.DEFENSE_TRIGGERED, {"trigger_id": 1, "model_id": "m"})
    state.enter(State.DEFENDING, trigger_id=1)
    assert state.pending_triggers() == {}


@pytest.fixture
def workspace(tmp_path):
    return seed_workspace(tmp_path / "ws")


def test_run_normal_serves_stored_baseline(workspace):
    state, model_id = run_normal(workspace, tiny_config())
    assert state.state is State.SERVING
    assert state.served_model_id == model_id
    record = volume_load(workspace, model_id)
    assert record.role is Role.BASELINE
    eval_data = registry_get_ref(workspace, "syn-eval:1")
    assert record.baseline_accuracy == evaluate_accuracy(record.model, eval_data)


def test_missing_dataset_moves_to_failed(tmp_path):
    with pytest.raises(NotFoundError):
        run_normal(tmp_path, tiny_config())
    state = PipelineState.load(tmp_path)
    assert state.state is State.FAILED
    cause = state.events(EventKind.STATE_ENTERED)[-1].payload["cause"]
    assert "syn-train" in cause


def test_attack_requires_serving(workspace):
    with pytest.raises(StateError):
        run_attack(PipelineState.create(workspace), tiny_config())


def test_full_loop_event_log(workspace):
    cfg = tiny_config()
    result = run_scenario(workspace, cfg)
    events = read_events(workspace / "events.jsonl")
    kinds = [e.kind for e in events]
    states = [e.payload["state"] for e in events if e.kind is EventKind.STATE_ENTERED]
    assert states == ["TrainingBaseline", "Serving", "Attacked", "Defending", "ServingHardened"]
    assert kinds.count(EventKind.DEFENSE_TRIGGERED) == 1
    # the adversarial stream is uploaded before the monitor sees it
    first_upload = kinds.index(EventKind.DATASET_UPLOADED)
    first_report = kinds.index(EventKind.MONITOR_REPORT)
    assert first_upload < first_report < kinds.index(EventKind.DEFENSE_TRIGGERED)
    pre = [e.payload for e in events if e.kind is EventKind.MONITOR_REPORT][0]
    assert pre["phase"] == "pre-defense" and pre["report"]["triggered"]
    assert pre["report"]["evaluated_on"]["name"] == "syn-eval-adv"

    hardened = volume_load(workspace, result.hardened_id)
    assert hardened.role is Role.HARDENED
    assert hardened.parent_model_id == result.baseline_id
    assert hardened.defense_config["epsilon_budget"] == 0.25

    resumed = PipelineState.load(workspace)
    assert resumed.state is State.SERVING_HARDENED
    assert resumed.served_model_id == result.hardened_id
    with pytest.raises(StateError):
        run_defense(resumed, cfg)  # at most once per trigger
    for line in (workspace / "events.jsonl").read_text().splitlines():
        assert set(json.loads(line)) == {"ts", "kind", "payload"}


def test_high_threshold_never_triggers(workspace):
    result = run_scenario(workspace, tiny_config(threshold=100.0))
    state = PipelineState.load(workspace)
    assert state.state is State.ATTACKED
    assert not state.events(EventKind.DEFENSE_TRIGGERED)
    assert result.hardened_id is None
    assert [m["role"] for m in volume_list(workspace)] == ["Baseline"]
    with pytest.raises(StateError):
        run_defense(state, tiny_config(threshold=100.0))


def test_grid_one_cell_csv(workspace):
    out = workspace / "grid.csv"
    results = run_grid(workspace, [(0.2, 0.2)], tiny_config(), csv_path=out)
    assert len(results) == 1 and results[0].error is None
    rows = list(csv.reader(out.open()))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 2 and len(rows[1]) == 6
    assert rows[1][:2] == ["0.20", "0.20"]
    for value in rows[1][2:]:
        assert 0.0 <= float(value) <= 100.0
    assert len(rows[1][2].split(".")[1]) == 2


def test_grid_matches_standalone_scenario(workspace, tmp_path):
    grid = run_grid(workspace, [(0.25, 0.25)], tiny_config())[0]
    alone = run_scenario(seed_workspace(tmp_path / "alone"), tiny_config())
    assert grid.csv_row() == alone.csv_row()


def test_grid_cell_failure_is_isolated(workspace):
    (workspace / "grid" / "cell-00-eps0.2-def0.2").mkdir(parents=True)
    results = run_grid(workspace, [(0.2, 0.2), (0.25, 0.2)], tiny_config(),
                       csv_path=workspace / "r.csv")
    assert results[0].error is not None and results[1].error is None
    rows = list(csv.reader((workspace / "r.csv").open()))
    assert rows[1][2:] == ["", "", "", ""]
    assert rows[2][2] != ""
