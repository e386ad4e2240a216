"""Closed-loop pipeline: train, serve, attack, monitor, defend, redeploy.

Each stage talks to the others only through the dataset registry, the model
volume and the event log, all rooted at one workspace directory. The event
log (``events.jsonl``) is append-only; :func:`replay` rebuilds the pipeline
state from it, which is how single-step CLI commands resume a run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from .attack import AttackConfig, build_adversarial_dataset
from .data import (LabeledDataset, Provenance, encode_dataset, parse_ref, registry_get,
                   registry_get_ref, registry_put, sha256_hex)
from .defense import DefenseConfig, adversarial_train
from .errors import StateError, ValidationError
from .monitor import DEFAULT_THRESHOLD_POINTS, MonitorReport, check_degradation, evaluate_accuracy
from .nn import Architecture, Model, TrainConfig, build_model, train
from .volume import ModelRecord, Role, encode_params, volume_load, volume_meta, volume_store

log = logging.getLogger(__name__)

EVENT_LOG = "events.jsonl"
CSV_HEADER = ("attack_eps", "defense_eps", "acc_fgsm_on_A", "acc_transfer_A_on_Aprime",
              "acc_whitebox_Aprime", "acc_clean_Aprime")


class State(str, Enum):
    IDLE = "Idle"
    TRAINING_BASELINE = "TrainingBaseline"
    SERVING = "Serving"
    ATTACKED = "Attacked"
    DEFENDING = "Defending"
    SERVING_HARDENED = "ServingHardened"
    FAILED = "Failed"


class EventKind(str, Enum):
    STATE_ENTERED = "StateEntered"
    DATASET_UPLOADED = "DatasetUploaded"
    MONITOR_REPORT = "MonitorReport"
    DEFENSE_TRIGGERED = "DefenseTriggered"
    MODEL_STORED = "ModelStored"


TRANSITIONS = {
    State.IDLE: {State.TRAINING_BASELINE},
    State.TRAINING_BASELINE: {State.SERVING},
    State.SERVING: {State.ATTACKED},
    State.ATTACKED: {State.DEFENDING},
    State.DEFENDING: {State.SERVING_HARDENED},
    State.SERVING_HARDENED: set(),
    State.FAILED: set(),
}


def is_legal(current: State, target: State) -> bool:
    return target is State.FAILED or target in TRANSITIONS[current]


@dataclass(frozen=True)
class Event:
    ts: str
    kind: EventKind
    payload: dict

    def to_json(self) -> dict:
        return {"ts": self.ts, "kind": self.kind.value, "payload": self.payload}

    @classmethod
    def from_json(cls, obj: dict) -> "Event":
        return cls(obj["ts"], EventKind(obj["kind"]), obj["payload"])


@dataclass
class ScenarioConfig:
    train_dataset: str
    eval_dataset: str
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    threshold_points: float = DEFAULT_THRESHOLD_POINTS
    architecture: Architecture = Architecture.SMALL_CNN
    hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        parse_ref(self.train_dataset)
        parse_ref(self.eval_dataset)
        self.architecture = Architecture(self.architecture)
        if not self.threshold_points >= 0:
            raise ValidationError("threshold_points must be >= 0")


class PipelineState:
    """State machine plus its append-only event log.

    With a ``log_path`` every appended event is also written as one JSON line.
    """

    def __init__(self, workspace, log_path: Path | None = None):
        self.workspace = Path(workspace)
        self.log_path = log_path
        self.state = State.IDLE
        self.served_model_id: str | None = None
        self.event_log: list[Event] = []

    @classmethod
    def create(cls, workspace) -> "PipelineState":
        """Fresh state for a new run; any previous event log is discarded."""
        root = Path(workspace)
        root.mkdir(parents=True, exist_ok=True)
        path = root / EVENT_LOG
        path.write_text("")
        return cls(root, path)

    @classmethod
    def load(cls, workspace) -> "PipelineState":
        """Rebuild the state of the run recorded in ``workspace``."""
        root = Path(workspace)
        path = root / EVENT_LOG
        events = read_events(path) if path.exists() else []
        state = replay(events, root)
        state.log_path = path
        return state

    def append(self, kind: EventKind, payload: dict) -> Event:
        event = Event(datetime.now(timezone.utc).isoformat(), EventKind(kind), payload)
        self._apply(event)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(event.to_json(), sort_keys=True) + "\n")
        return event

    def enter(self, target: State, **payload) -> Event:
        target = State(target)
        if not is_legal(self.state, target):
            raise StateError(f"illegal transition {self.state.value} -> {target.value}")
        if target is State.DEFENDING:
            trigger_id = payload.get("trigger_id")
            if trigger_id not in self.pending_triggers():
                raise StateError("Defending needs a pending DefenseTriggered event")
        return self.append(EventKind.STATE_ENTERED, {"state": target.value, **payload})

    def _apply(self, event: Event) -> None:
        if event.kind is EventKind.STATE_ENTERED:
            target = State(event.payload["state"])
            if not is_legal(self.state, target):
                raise StateError(f"illegal transition {self.state.value} -> {target.value}")
            self.state = target
            if "served_model_id" in event.payload:
                self.served_model_id = event.payload["served_model_id"]
        self.event_log.append(event)

    # -- queries --

    def events(self, kind: EventKind) -> list[Event]:
        return [e for e in self.event_log if e.kind is kind]

    def reports(self) -> list[MonitorReport]:
        return [MonitorReport.from_json(e.payload["report"])
                for e in self.events(EventKind.MONITOR_REPORT)]

    def pending_triggers(self) -> dict[int, Event]:
        consumed = {e.payload.get("trigger_id") for e in self.events(EventKind.STATE_ENTERED)
                    if e.payload["state"] == State.DEFENDING.value}
        return {e.payload["trigger_id"]: e for e in self.events(EventKind.DEFENSE_TRIGGERED)
                if e.payload["trigger_id"] not in consumed}


def read_events(path) -> list[Event]:
    events = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            events.append(Event.from_json(json.loads(line)))
    return events


def replay(events, workspace=".") -> PipelineState:
    state = PipelineState(workspace)
    for event in events:
        state._apply(event)
    return state


# -- caching shared by grid cells -----------------------------------------


def dataset_fingerprint(dataset: LabeledDataset) -> str:
    return sha256_hex(encode_dataset(dataset))


def _baseline_key(cfg: ScenarioConfig, data: LabeledDataset) -> tuple:
    return ("baseline", dataset_fingerprint(data), cfg.architecture.value, cfg.hidden,
            cfg.seed, tuple(sorted(asdict(cfg.train).items())))


def _hardened_key(base: ModelRecord, cfg: DefenseConfig, data: LabeledDataset) -> tuple:
    return ("hardened", base.checksum, dataset_fingerprint(data),
            tuple(sorted(asdict(cfg).items())))


def _fail(state: PipelineState, exc: BaseException) -> None:
    if state.state is not State.FAILED:
        state.enter(State.FAILED, cause=f"{type(exc).__name__}: {exc}")


# -- stages ---------------------------------------------------------------


def run_normal(workspace, cfg: ScenarioConfig, state: PipelineState | None = None,
               cache: dict | None = None) -> tuple[PipelineState, str]:
    """Train and store the baseline model, then start serving it."""
    state = state or PipelineState.create(workspace)
    if state.state is not State.IDLE:
        raise StateError(f"run_normal needs state Idle, not {state.state.value}")
    state.enter(State.TRAINING_BASELINE, train_dataset=cfg.train_dataset)
    try:
        train_data = registry_get_ref(state.workspace, cfg.train_dataset)
        eval_data = registry_get_ref(state.workspace, cfg.eval_dataset)
        key = _baseline_key(cfg, train_data)
        if cache is not None and key in cache:
            model = cache[key]
        else:
            model, _ = train(build_model(cfg.architecture, cfg.seed, cfg.hidden),
                             train_data, cfg.train)
            if cache is not None:
                cache[key] = model
        alpha = evaluate_accuracy(model, eval_data)
        record = ModelRecord(Role.BASELINE, model, alpha,
                             train_config={**asdict(cfg.train),
                                           "architecture": cfg.architecture.value,
                                           "hidden": cfg.hidden, "init_seed": cfg.seed,
                                           "train_dataset": cfg.train_dataset})
        model_id = volume_store(state.workspace, record)
        state.append(EventKind.MODEL_STORED, {"model_id": model_id, "role": Role.BASELINE.value,
                                              "baseline_accuracy": alpha,
                                              "checksum": record.checksum})
    except Exception as exc:
        _fail(state, exc)
        raise
    state.enter(State.SERVING, served_model_id=model_id)
    return state, model_id


def _upload_and_report(state: PipelineState, model: Model, baseline_accuracy: float,
                       adv: LabeledDataset, threshold: float) -> MonitorReport:
    entry = registry_put(state.workspace, adv)
    state.append(EventKind.DATASET_UPLOADED, {
        "name": entry.name, "version": entry.version,
        "provenance": entry.provenance.value, "checksum": entry.checksum})
    stream = registry_get(state.workspace, entry.name, entry.version)
    observed = evaluate_accuracy(model, stream)
    return check_degradation(baseline_accuracy, observed, threshold,
                             evaluated_on={"name": entry.name, "version": entry.version})


def run_attack(state: PipelineState, cfg: ScenarioConfig) -> PipelineState:
    """Insider FGSM attack on the served model followed by one monitor check."""
    if state.state is not State.SERVING or not state.served_model_id:
        raise StateError(f"run_attack needs a served model (state {state.state.value})")
    try:
        record = volume_load(state.workspace, state.served_model_id)
        clean = registry_get_ref(state.workspace, cfg.eval_dataset)
        adv = build_adversarial_dataset(
            record.model, clean, cfg.attack, name=f"{clean.name}-adv",
            version=f"fgsm-eps{cfg.attack.epsilon:g}-{record.model_id}")
        entry = registry_put(state.workspace, adv)
        state.append(EventKind.DATASET_UPLOADED, {
            "name": entry.name, "version": entry.version,
            "provenance": entry.provenance.value, "checksum": entry.checksum,
            "attack": asdict(cfg.attack), "source_model_id": record.model_id})
        state.enter(State.ATTACKED)
        stream = registry_get(state.workspace, entry.name, entry.version)
        observed = evaluate_accuracy(record.model, stream)
        report = check_degradation(record.baseline_accuracy, observed, cfg.threshold_points,
                                   evaluated_on={"name": entry.name, "version": entry.version})
    except Exception as exc:
        _fail(state, exc)
        raise
    state.append(EventKind.MONITOR_REPORT, {"model_id": record.model_id, "phase": "pre-defense",
                                            "report": report.to_json()})
    if report.triggered:
        trigger_id = len(state.events(EventKind.DEFENSE_TRIGGERED)) + 1
        state.append(EventKind.DEFENSE_TRIGGERED, {
            "trigger_id": trigger_id, "model_id": record.model_id,
            "evaluated_on": report.evaluated_on, "drop_points": report.drop_points})
    return state


def run_defense(state: PipelineState, cfg: ScenarioConfig,
                cache: dict | None = None) -> tuple[PipelineState, str]:
    """Adversarially fine-tune the attacked model and redeploy it."""
    pending = state.pending_triggers()
    if state.state is not State.ATTACKED or not pending:
        raise StateError(
            f"run_defense needs a pending DefenseTriggered event (state {state.state.value})")
    trigger_id = min(pending)
    trigger = pending[trigger_id]
    # f_A keeps serving while the hardened model is trained
    state.enter(State.DEFENDING, trigger_id=trigger_id, serving=state.served_model_id)
    try:
        base = volume_load(state.workspace, trigger.payload["model_id"])
        train_data = registry_get_ref(state.workspace, cfg.train_dataset)
        eval_data = registry_get_ref(state.workspace, cfg.eval_dataset)
        key = _hardened_key(base, cfg.defense, train_data)
        if cache is not None and key in cache:
            hardened = cache[key]
        else:
            hardened, _ = adversarial_train(base.model, train_data, cfg.defense)
            if cache is not None:
                cache[key] = hardened
        clean_acc = evaluate_accuracy(hardened, eval_data)
        record = ModelRecord(Role.HARDENED, hardened, clean_acc,
                             train_config=base.train_config,
                             defense_config={**asdict(cfg.defense),
                                             "train_dataset": cfg.train_dataset},
                             parent_model_id=base.model_id)
        hardened_id = volume_store(state.workspace, record)
        state.append(EventKind.MODEL_STORED, {"model_id": hardened_id,
                                              "role": Role.HARDENED.value,
                                              "parent_model_id": base.model_id,
                                              "clean_accuracy": clean_acc,
                                              "checksum": record.checksum})
        state.enter(State.SERVING_HARDENED, served_model_id=hardened_id)
        ref = trigger.payload["evaluated_on"]
        stream = registry_get(state.workspace, ref["name"], ref["version"])
        observed = evaluate_accuracy(hardened, stream)
        report = check_degradation(base.baseline_accuracy, observed, cfg.threshold_points,
                                   evaluated_on=ref)
    except Exception as exc:
        _fail(state, exc)
        raise
    state.append(EventKind.MONITOR_REPORT, {"model_id": hardened_id, "phase": "post-defense",
                                            "report": report.to_json()})
    return state, hardened_id


def evaluate_whitebox(state: PipelineState, cfg: ScenarioConfig) -> MonitorReport:
    """FGSM crafted against the currently served hardened model, evaluated on itself."""
    if state.state is not State.SERVING_HARDENED:
        raise StateError("white-box evaluation needs a served hardened model")
    record = volume_load(state.workspace, state.served_model_id)
    parent = volume_meta(state.workspace, record.parent_model_id)
    clean = registry_get_ref(state.workspace, cfg.eval_dataset)
    adv = build_adversarial_dataset(
        record.model, clean, cfg.attack, name=f"{clean.name}-adv",
        version=f"fgsm-eps{cfg.attack.epsilon:g}-{record.model_id}")
    report = _upload_and_report(state, record.model, parent["baseline_accuracy"], adv,
                                cfg.threshold_points)
    state.append(EventKind.MONITOR_REPORT, {"model_id": record.model_id, "phase": "white-box",
                                            "report": report.to_json()})
    return report


# -- scenario / grid ------------------------------------------------------


@dataclass
class ScenarioResult:
    attack_eps: float
    defense_eps: float
    baseline_id: str | None = None
    hardened_id: str | None = None
    clean_A: float = math.nan
    fgsm_on_A: float = math.nan
    transfer: float = math.nan
    whitebox: float = math.nan
    clean_Aprime: float = math.nan
    error: str | None = None

    def csv_row(self) -> list[str]:
        def pct(v):
            return "" if math.isnan(v) else f"{100.0 * v:.2f}"
        return [f"{self.attack_eps:.2f}", f"{self.defense_eps:.2f}", pct(self.fgsm_on_A),
                pct(self.transfer), pct(self.whitebox), pct(self.clean_Aprime)]


def run_scenario(workspace, cfg: ScenarioConfig, cache: dict | None = None) -> ScenarioResult:
    """Full closed loop: normal usage, attack, (triggered) defense, white-box check."""
    result = ScenarioResult(cfg.attack.epsilon, cfg.defense.epsilon_budget)
    state, result.baseline_id = run_normal(workspace, cfg, cache=cache)
    result.clean_A = volume_load(workspace, result.baseline_id).baseline_accuracy
    run_attack(state, cfg)
    result.fgsm_on_A = state.reports()[-1].observed_accuracy
    if not state.pending_triggers():
        log.info("attack did not trigger the defense; nothing to harden")
        return result
    state, result.hardened_id = run_defense(state, cfg, cache=cache)
    result.transfer = state.reports()[-1].observed_accuracy
    result.clean_Aprime = volume_meta(workspace, result.hardened_id)["baseline_accuracy"]
    result.whitebox = evaluate_whitebox(state, cfg).observed_accuracy
    return result


def write_results_csv(results, path) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in results:
        writer.writerow(r.csv_row())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def with_budgets(cfg: ScenarioConfig, attack_eps: float, defense_eps: float) -> ScenarioConfig:
    return ScenarioConfig(
        cfg.train_dataset, cfg.eval_dataset, cfg.train,
        AttackConfig(attack_eps, cfg.attack.clip_min, cfg.attack.clip_max, cfg.attack.seed),
        DefenseConfig(**{**asdict(cfg.defense), "epsilon_budget": defense_eps}),
        cfg.threshold_points, cfg.architecture, cfg.hidden, cfg.seed)


def _harden(args):
    base_model, train_data, defense_cfg = args
    return adversarial_train(base_model, train_data, defense_cfg)[0]


def run_grid(workspace, grid, base_cfg: ScenarioConfig, csv_path=None,
             parallel: int = 1) -> list[ScenarioResult]:
    """One closed-loop scenario per (attack eps, defense eps) pair.

    Cells run in disjoint workspaces ``<workspace>/grid/cell-XX`` seeded with
    copies of the clean datasets. The baseline and every distinct hardened
    model are trained once and shared by all cells that need them (results
    are identical to retraining because every stage is seeded).
    """
    pairs = [(float(a), float(d)) for a, d in grid]
    if not pairs:
        raise ValidationError("grid must contain at least one (attack, defense) pair")
    root = Path(workspace)
    train_data = registry_get_ref(root, base_cfg.train_dataset)
    eval_data = registry_get_ref(root, base_cfg.eval_dataset)
    cfgs = [with_budgets(base_cfg, a, d) for a, d in pairs]
    cache: dict = {}

    # baseline first, then every distinct defense budget (optionally in parallel)
    model, _ = train(build_model(base_cfg.architecture, base_cfg.seed, base_cfg.hidden),
                     train_data, base_cfg.train)
    cache[_baseline_key(base_cfg, train_data)] = model
    probe = ModelRecord(Role.BASELINE, model, 0.0, checksum=sha256_hex(encode_params(model)))
    distinct = []
    for cfg in cfgs:
        key = _hardened_key(probe, cfg.defense, train_data)
        if key not in {k for k, _ in distinct}:
            distinct.append((key, cfg.defense))
    jobs = [(model, train_data, d) for _, d in distinct]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            hardened = list(pool.map(_harden, jobs))
    else:
        hardened = [_harden(job) for job in jobs]
    for (key, _), h in zip(distinct, hardened):
        cache[key] = h

    results = []
    for i, cfg in enumerate(cfgs):
        a, d = pairs[i]
        cell = root / "grid" / f"cell-{i:02d}-eps{a:g}-def{d:g}"
        try:
            if cell.exists():
                raise ValidationError(f"grid cell directory {cell} already exists")
            for ds in (train_data, eval_data):
                registry_put(cell, ds)
            result = run_scenario(cell, cfg, cache=cache)
        except Exception as exc:
            log.error("grid cell %d (eps=%g, budget=%g) failed: %s", i, a, d, exc)
            result = ScenarioResult(a, d, error=f"{type(exc).__name__}: {exc}")
        results.append(result)
        log.info("cell %d eps=%.2f budget=%.2f -> %s", i, a, d, ",".join(result.csv_row()[2:]))
    if csv_path is not None:
        write_results_csv(results, csv_path)
    return results
