import json

import numpy as np
import pytest

from advloop.cli import main
from advloop.data import write_idx
from pipeline_fixtures import seed_workspace

TINY = ["--architecture", "MLP", "--hidden", "16", "--epochs", "4", "--batch-size", "32",
        "--pgd-steps", "3", "--step-size", "0.05", "--defense-epochs", "2",
        "--defense-learning-rate", "1e-3",
        "--train-dataset", "syn-train:1", "--eval-dataset", "syn-eval:1"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def ws(tmp_path):
    return seed_workspace(tmp_path / "ws")


def test_unknown_subcommand_is_usage_error(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "invalid choice" in err


def test_missing_subcommand(capsys):
    assert run(capsys)[0] == 1


def test_invalid_config_value(capsys, ws):
    code, _, err = run(capsys, "--workspace", str(ws), "train", *TINY, "--attack-eps", "-0.1")
    assert code == 1 and "validation error" in err


def test_unknown_manifest_key(capsys, ws, tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"epochs": 2, "colour": "blue"}))
    code, _, err = run(capsys, "--workspace", str(ws), "--config", str(cfg), "train")
    assert code == 1 and "colour" in err


def test_missing_dataset_is_validation_error(capsys, tmp_path):
    code, _, err = run(capsys, "--workspace", str(tmp_path), "train", *TINY)
    assert code == 1 and "not in the registry" in err


def test_csv_outside_workspace_rejected(capsys, ws, tmp_path):
    code, _, _ = run(capsys, "--workspace", str(ws), "run-scenario", *TINY,
                     "--csv", str(tmp_path / "elsewhere.csv"))
    assert code == 1
    code, _, _ = run(capsys, "--workspace", str(ws), "run-scenario", *TINY, "--csv", "../x.csv")
    assert code == 1


def test_runtime_failure_exit_code(capsys, ws):
    code, _, err = run(capsys, "--workspace", str(ws), "eval", "--model", "baseline-nope",
                       "--dataset", "syn-eval:1")
    assert code == 2 and "NotFoundError" in err


def test_attack_before_train_is_runtime_failure(capsys, ws):
    code, _, err = run(capsys, "--workspace", str(ws), "attack", *TINY)
    assert code == 2 and "StateError" in err


def test_ingest_and_listing(capsys, tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=12, dtype=np.uint8)
    write_idx(images, labels, tmp_path / "img", tmp_path / "lab")
    ws = tmp_path / "ws"
    code, out, _ = run(capsys, "ingest-mnist", "--images", str(tmp_path / "img"),
                       "--labels", str(tmp_path / "lab"), "--name", "digits",
                       "--workspace", str(ws))
    assert code == 0 and json.loads(out)["n"] == 12
    code, out, _ = run(capsys, "--workspace", str(ws), "--seed", "4", "make-synthetic",
                       "--n-per-class", "3", "--name", "syn")
    assert code == 0 and json.loads(out)["n"] == 30
    code, out, _ = run(capsys, "--workspace", str(ws), "registry", "ls")
    lines = out.strip().splitlines()
    assert [l.split("\t")[0] for l in lines] == ["digits:1", "syn:1"]
    assert all(l.split("\t")[1] == "Clean" for l in lines)


def test_ingest_bad_file(capsys, tmp_path):
    (tmp_path / "junk").write_bytes(b"\x00\x00\x08")
    code, _, _ = run(capsys, "--workspace", str(tmp_path), "ingest-mnist",
                     "--images", str(tmp_path / "junk"), "--labels", str(tmp_path / "junk"))
    assert code == 1


def test_stepwise_commands(capsys, ws):
    code, out, _ = run(capsys, "--workspace", str(ws), "train", *TINY)
    assert code == 0
    trained = json.loads(out)
    assert trained["state"] == "Serving"
    code, out, _ = run(capsys, "--workspace", str(ws), "eval", "--model", trained["model_id"],
                       "--dataset", "syn-eval:1")
    assert code == 0
    printed = out.strip()
    assert printed == f"{100 * trained['baseline_accuracy']:.2f}"
    code, out, _ = run(capsys, "--workspace", str(ws), "attack", *TINY)
    attacked = json.loads(out)
    assert code == 0 and attacked["state"] == "Attacked" and attacked["report"]["triggered"]
    code, out, _ = run(capsys, "--workspace", str(ws), "defend", *TINY)
    defended = json.loads(out)
    assert code == 0 and defended["state"] == "ServingHardened"
    code, out, _ = run(capsys, "--workspace", str(ws), "volume", "ls")
    rows = [l.split("\t") for l in out.strip().splitlines()]
    hardened = [r for r in rows if r[1] == "Hardened"][0]
    assert hardened[0] == defended["model_id"] and hardened[4] == trained["model_id"]
    code, _, _ = run(capsys, "--workspace", str(ws), "defend", *TINY)
    assert code == 2


def test_run_scenario_is_deterministic(capsys, tmp_path):
    outputs = []
    for name in ("a", "b"):
        ws = seed_workspace(tmp_path / name)
        code, out, _ = run(capsys, "run-scenario", "--workspace", str(ws), *TINY, "--csv", "r.csv")
        assert code == 0
        info = json.loads(out)
        params = (ws / "volume" / "models" / info["hardened_id"] / "params.bin").read_bytes()
        outputs.append(((ws / "r.csv").read_bytes(), params))
    assert outputs[0] == outputs[1]


def test_run_grid_writes_csv_and_figures(capsys, ws):
    code, out, _ = run(capsys, "--workspace", str(ws), "run-grid", *TINY,
                       "--grid", "0.2:0.2,0.25:0.25", "--csv", "g.csv", "--figures-dir", "figs")
    assert code == 0
    info = json.loads(out)
    assert info["rows"] == 2 and info["failed_cells"] == 0
    assert len((ws / "g.csv").read_text().strip().splitlines()) == 3
    for name in ("transfer.png", "whitebox.png", "whitebox_grid.png"):
        assert (ws / "figs" / name).read_bytes()[:4] == b"\x89PNG"


def test_run_grid_bad_pair(capsys, ws):
    code, _, _ = run(capsys, "--workspace", str(ws), "run-grid", *TINY, "--grid", "0.2-0.3")
    assert code == 1


def test_ingest_bundled_sample(capsys, tmp_path):
    pytest.importorskip("mlxtend")
    code, out, _ = run(capsys, "--workspace", str(tmp_path), "ingest-mnist", "--bundled")
    assert code == 0
    assert [(d["dataset"], d["n"]) for d in json.loads(out)["datasets"]] == [
        ("mnist-train:1", 4000), ("mnist-test:1", 1000)]
    assert (tmp_path / "raw" / "test-labels-idx1-ubyte").exists()


def test_ingest_needs_a_source(capsys, tmp_path):
    assert run(capsys, "--workspace", str(tmp_path), "ingest-mnist")[0] == 1
