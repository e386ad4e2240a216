"""Flat JSON run manifest; command-line flags override file values."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attack import AttackConfig
from .defense import DefenseConfig
from .errors import ValidationError
from .nn import Architecture, TrainConfig
from .orchestrator import ScenarioConfig

# (attack eps, defense budget) pairs evaluated in the reference experiments
TABLE_GRID = (
    (0.15, 0.10), (0.15, 0.15), (0.15, 0.20),
    (0.20, 0.15), (0.20, 0.20), (0.20, 0.25),
    (0.25, 0.20), (0.25, 0.25), (0.25, 0.30),
)


@dataclass
class RunManifest:
    workspace: str = "workspace"
    seed: int = 0
    train_dataset: str = "mnist-train:1"
    eval_dataset: str = "mnist-test:1"
    architecture: str = Architecture.SMALL_CNN.value
    hidden: int = 128
    epochs: int = 10
    learning_rate: float = 0.001
    batch_size: int = 64
    attack_epsilon: float = 0.25
    defense_epsilon: float = 0.25
    pgd_steps: int = 20
    step_size: float = 0.01
    defense_epochs: int = 20
    defense_learning_rate: float = 0.0001
    random_start: bool = True
    threshold_points: float = 5.0
    grid: list = field(default_factory=lambda: [list(p) for p in TABLE_GRID])
    output_csv: str = "results.csv"
    figures_dir: str = "figures"
    parallel: int = 1

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunManifest":
        values = {}
        if path is not None:
            try:
                values = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
            if not isinstance(values, dict):
                raise ValidationError("manifest must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown manifest keys: {', '.join(sorted(unknown))}")
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        manifest = cls(**values)
        manifest.scenario()  # validate every sub-config up front
        manifest.grid_pairs()
        return manifest

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def root(self) -> Path:
        return Path(self.workspace)

    def scenario(self) -> ScenarioConfig:
        try:
            return ScenarioConfig(
                train_dataset=self.train_dataset,
                eval_dataset=self.eval_dataset,
                train=TrainConfig(self.epochs, self.learning_rate, self.batch_size, self.seed),
                attack=AttackConfig(self.attack_epsilon, seed=self.seed),
                defense=DefenseConfig(
                    epsilon_budget=self.defense_epsilon, step_size_alpha=self.step_size,
                    pgd_steps_k=self.pgd_steps, epochs=self.defense_epochs,
                    learning_rate=self.defense_learning_rate,
                    random_start=bool(self.random_start), seed=self.seed,
                    batch_size=self.batch_size),
                threshold_points=self.threshold_points,
                architecture=self.architecture,
                hidden=self.hidden,
                seed=self.seed,
            )
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(str(exc)) from exc

    def grid_pairs(self) -> list[tuple[float, float]]:
        try:
            pairs = [(float(a), float(d)) for a, d in self.grid]
        except (TypeError, ValueError) as exc:
            raise ValidationError("grid must be a list of [attack_eps, defense_eps] pairs") from exc
        if not pairs:
            raise ValidationError("grid must not be empty")
        for a, d in pairs:
            AttackConfig(a)
            DefenseConfig(epsilon_budget=d)
        return pairs

    def output_path(self, value: str) -> Path:
        """Resolve an output path, which must stay inside the workspace."""
        path = Path(value)
        if not path.is_absolute():
            path = self.root / path
        root = self.root.resolve()
        resolved = path.resolve()
        if resolved != root and root not in resolved.parents:
            raise ValidationError(f"output {value} lies outside workspace {self.workspace}")
        return resolved
