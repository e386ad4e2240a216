"""Command-line entry point (``advloop``).

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Machine-readable output goes to stdout; progress lines go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import data as datamod
from .errors import (AdvLoopError, ConsistencyError, FormatError, ValidationError)
from .manifest import RunManifest
from .monitor import evaluate_accuracy
from .orchestrator import (PipelineState, run_attack, run_defense, run_grid, run_normal,
                           run_scenario, write_results_csv)
from .volume import volume_list, volume_load

log = logging.getLogger("advloop")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# flag dest -> manifest key
_SCENARIO_FLAGS = {
    "train_dataset": "train_dataset", "eval_dataset": "eval_dataset",
    "architecture": "architecture", "hidden": "hidden", "epochs": "epochs",
    "learning_rate": "learning_rate", "batch_size": "batch_size",
    "attack_eps": "attack_epsilon", "defense_eps": "defense_epsilon",
    "pgd_steps": "pgd_steps", "step_size": "step_size",
    "defense_epochs": "defense_epochs", "defense_learning_rate": "defense_learning_rate",
    "random_start": "random_start", "threshold": "threshold_points",
    "csv": "output_csv", "figures_dir": "figures_dir", "parallel": "parallel",
}


def _global_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--workspace", default=argparse.SUPPRESS,
                   help="root directory for registry, volume and logs")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON run manifest")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def _scenario_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("scenario")
    g.add_argument("--train-dataset", help="name:version of the clean training set")
    g.add_argument("--eval-dataset", help="name:version of the clean evaluation stream")
    g.add_argument("--architecture", choices=["SmallCNN", "MLP"])
    g.add_argument("--hidden", type=int, help="MLP hidden width")
    g.add_argument("--epochs", type=int, help="baseline epochs (default 10)")
    g.add_argument("--learning-rate", type=float, help="baseline learning rate (default 1e-3)")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--attack-eps", type=float, help="FGSM magnitude")
    g.add_argument("--defense-eps", type=float, help="PGD perturbation budget")
    g.add_argument("--pgd-steps", type=int, help="PGD iterations per batch (default 20)")
    g.add_argument("--step-size", type=float, help="PGD step size (default 0.01)")
    g.add_argument("--defense-epochs", type=int, help="fine-tuning epochs (default 20)")
    g.add_argument("--defense-learning-rate", type=float, help="fine-tuning rate (default 1e-4)")
    g.add_argument("--no-random-start", dest="random_start", action="store_const", const=False)
    g.add_argument("--threshold", type=float, help="trigger threshold in accuracy points")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    scen = _scenario_options()
    parser = _Parser(prog="advloop", parents=[common],
                     description="Attack / detect / defend loop for small image classifiers.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("ingest-mnist", parents=[common], help="load IDX files into the registry")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--bundled", action="store_true",
                   help="register the 5000-digit sample shipped with mlxtend as "
                        "<name>-train / <name>-test (4000/1000 split)")
    p.add_argument("--name", default="mnist")
    p.add_argument("--version", default="1")

    p = sub.add_parser("make-synthetic", parents=[common], help="register a synthetic dataset")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--noise-std", type=float, default=0.2)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--version", default="1")

    sub.add_parser("train", parents=[common, scen], help="train, store and serve the baseline")
    sub.add_parser("attack", parents=[common, scen], help="FGSM insider attack + monitor check")
    sub.add_parser("defend", parents=[common, scen], help="run the triggered defense pipeline")

    p = sub.add_parser("eval", parents=[common], help="accuracy of a stored model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, help="name:version")

    p = sub.add_parser("run-scenario", parents=[common, scen], help="full closed loop")
    p.add_argument("--csv", help="results CSV (relative to the workspace)")

    p = sub.add_parser("run-grid", parents=[common, scen], help="attack/defense budget grid")
    p.add_argument("--csv", help="results CSV (relative to the workspace)")
    p.add_argument("--grid", help="comma-separated attack:budget pairs, e.g. 0.15:0.10,0.25:0.25")
    p.add_argument("--figures-dir", help="directory for PNG figures (relative to the workspace)")
    p.add_argument("--parallel", type=int, help="worker processes for hardening jobs")

    p = sub.add_parser("registry", parents=[common], help="dataset registry commands")
    rs = p.add_subparsers(dest="action", parser_class=_Parser, metavar="ACTION")
    rs.required = True
    rs.add_parser("ls", parents=[common], help="list registered datasets")

    p = sub.add_parser("volume", parents=[common], help="model volume commands")
    vs = p.add_subparsers(dest="action", parser_class=_Parser, metavar="ACTION")
    vs.required = True
    vs.add_parser("ls", parents=[common], help="list stored models")
    return parser


def _parse_grid(text: str) -> list[list[float]]:
    pairs = []
    for item in text.split(","):
        try:
            a, d = item.split(":")
            pairs.append([float(a), float(d)])
        except ValueError as exc:
            raise ValidationError(f"bad grid pair {item!r}; expected attack:budget") from exc
    return pairs


def _manifest(args) -> RunManifest:
    overrides = {}
    for dest, key in _SCENARIO_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "grid", None):
        overrides["grid"] = _parse_grid(args.grid)
    for key in ("workspace", "seed"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return RunManifest.load(getattr(args, "config", None), overrides)


def _emit(obj) -> None:
    if isinstance(obj, str):
        print(obj)
    else:
        print(json.dumps(obj, indent=2, sort_keys=True))


def _require_datasets(m: RunManifest) -> None:
    for ref in (m.train_dataset, m.eval_dataset):
        name, version = datamod.parse_ref(ref)
        if not (m.root / "datasets" / name / version / "meta.json").exists():
            raise ValidationError(f"dataset {ref} is not in the registry at {m.workspace}")


def _dispatch(args) -> int:
    m = _manifest(args)
    root = m.root
    cmd = args.command
    if cmd == "ingest-mnist" and args.bundled:
        if args.images or args.labels:
            raise ValidationError("--bundled cannot be combined with --images/--labels")
        paths = datamod.export_bundled_mnist_subset(m.output_path("raw"), seed=m.seed)
        out = []
        for split in ("train", "test"):
            ds = datamod.load_idx(paths[f"{split}_images"], paths[f"{split}_labels"],
                                  f"{args.name}-{split}", args.version)
            entry = datamod.registry_put(root, ds)
            out.append({"dataset": f"{entry.name}:{entry.version}", "n": len(ds),
                        "checksum": entry.checksum})
        _emit({"datasets": out})
    elif cmd == "ingest-mnist":
        if not (args.images and args.labels):
            raise ValidationError("ingest-mnist needs --images and --labels (or --bundled)")
        ds = datamod.load_idx(args.images, args.labels, args.name, args.version)
        entry = datamod.registry_put(root, ds)
        _emit({"dataset": f"{entry.name}:{entry.version}", "n": len(ds),
               "checksum": entry.checksum})
    elif cmd == "make-synthetic":
        ds = datamod.make_synthetic(args.n_per_class, args.n_classes, m.seed,
                                    noise_std=args.noise_std, name=args.name,
                                    version=args.version)
        entry = datamod.registry_put(root, ds)
        _emit({"dataset": f"{entry.name}:{entry.version}", "n": len(ds),
               "checksum": entry.checksum})
    elif cmd == "train":
        _require_datasets(m)
        state, model_id = run_normal(root, m.scenario())
        record = volume_load(root, model_id)
        _emit({"model_id": model_id, "state": state.state.value,
               "baseline_accuracy": record.baseline_accuracy})
    elif cmd == "attack":
        state = run_attack(PipelineState.load(root), m.scenario())
        _emit({"state": state.state.value, "report": state.reports()[-1].to_json()})
    elif cmd == "defend":
        state, hardened_id = run_defense(PipelineState.load(root), m.scenario())
        _emit({"model_id": hardened_id, "state": state.state.value,
               "report": state.reports()[-1].to_json()})
    elif cmd == "eval":
        record = volume_load(root, args.model)
        ds = datamod.registry_get_ref(root, args.dataset)
        _emit(f"{100.0 * evaluate_accuracy(record.model, ds):.2f}")
    elif cmd == "run-scenario":
        _require_datasets(m)
        csv_path = m.output_path(getattr(args, "csv", None) or m.output_csv)
        result = run_scenario(root, m.scenario())
        write_results_csv([result], csv_path)
        _emit({"csv": str(csv_path), "baseline_id": result.baseline_id,
               "hardened_id": result.hardened_id, "row": result.csv_row()})
    elif cmd == "run-grid":
        _require_datasets(m)
        csv_path = m.output_path(m.output_csv)
        fig_dir = m.output_path(m.figures_dir)
        results = run_grid(root, m.grid_pairs(), m.scenario(), csv_path, parallel=m.parallel)
        from .report import plot_accuracy_evolution, plot_grid_heatmap

        figures = plot_accuracy_evolution(results, fig_dir)
        figures["heatmap"] = plot_grid_heatmap(results, fig_dir / "whitebox_grid.png")
        failed = [r for r in results if r.error]
        _emit({"csv": str(csv_path), "rows": len(results), "failed_cells": len(failed),
               "figures": {k: str(v) for k, v in figures.items()}})
        if failed:
            return EXIT_RUNTIME
    elif cmd == "registry":
        for e in datamod.registry_list(root):
            print(f"{e.name}:{e.version}\t{e.provenance.value}\t{e.checksum}\t{e.created_at}")
    elif cmd == "volume":
        for meta in volume_list(root):
            print(f"{meta['model_id']}\t{meta['role']}\t{meta['architecture']}\t"
                  f"{100.0 * meta['baseline_accuracy']:.2f}\t{meta['parent_model_id'] or '-'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ValidationError, FormatError, ConsistencyError) as exc:
        print(f"advloop: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AdvLoopError as exc:
        print(f"advloop: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"advloop: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
