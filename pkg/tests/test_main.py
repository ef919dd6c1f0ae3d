import json

import pandas as pd
import pytest

from complib import ComponentLibrary
from main import main
from tech import estimate_power, load_cell_library

CONFIG = """
k = [1, 2]
hidden = [2, 3]
workspace = "{workspace}"

[train]
epochs = 3
batch_size = 8
learning_rates = [0.01]

[cgp]
max_iterations = 20
restarts = 1
points = 2

[nsga]
population = 8
generations = 2

[variation]
trials = 5
"""

STAGES = ("gen-exact", "build-library", "optimize", "variation", "report")


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG.format(workspace=tmp_path / "workspaces"), encoding="utf-8")
    return path


def _train(config, data, out) -> int:
    return main(["train", "--config", str(config), "--data", str(data), "--label", "label", "--out", str(out)])


def test_full_pipeline(tmp_path, run_config, toy_csv):
    out = tmp_path / "run"
    assert _train(run_config, toy_csv, out) == 0
    for command in STAGES:
        assert main([command, "--config", str(run_config), "--out", str(out)]) == 0, command

    for k in (1, 2):
        assert (out / "models" / f"model-k{k}.json").exists()
        exact = json.loads((out / "exact" / f"report-k{k}.json").read_text(encoding="utf-8"))
        assert exact["hw_sw_mismatches"] == 0
        assert exact["power_mw"] >= 0
        assert (out / "fronts" / f"front-k{k}.csv").exists()
    assert (out / "library" / "library.db").exists()
    evolved = [c for c in ComponentLibrary.load(out / "library") if c.metric is not None]
    assert all((out / "library" / "runs" / f"{c.run_id}.json").exists() for c in evolved)
    assert (out / "fronts" / "fronts.svg").exists()
    assert json.loads((out / "variation" / "summary.json").read_text(encoding="utf-8"))

    front = pd.read_csv(out / "fronts" / "system_front.csv")
    assert len(front) >= 1
    assert front["total_area"].is_monotonic_increasing

    rows = json.loads((out / "report.json").read_text(encoding="utf-8"))
    exact_rows = [r for r in rows if r["design"].startswith("exact")]
    assert [r["k"] for r in exact_rows] == [1, 2]
    assert all(r["accuracy_loss"] == 0.0 for r in exact_rows)
    assert all(r["accuracy_loss"] <= 0.05 + 1e-9 for r in rows)
    # every row prices power from its own classifier area plus the same converters
    lib = load_cell_library()
    for exact in exact_rows:
        interface_power = exact["total_power_mw"] - estimate_power(lib, exact["classifier_area_mm2"] / lib.area_unit_mm2)
        for r in (r for r in rows if r["k"] == exact["k"]):
            classifier_power = estimate_power(lib, r["classifier_area_mm2"] / lib.area_unit_mm2)
            assert r["total_power_mw"] == pytest.approx(classifier_power + interface_power)
            assert r["battery_feasible"] == (r["total_power_mw"] <= 30.0)


def test_rerun_is_a_no_op(tmp_path, run_config, toy_csv):
    out = tmp_path / "run"
    assert _train(run_config, toy_csv, out) == 0
    model = out / "models" / "model-k1.json"
    inode = model.stat().st_ino
    assert _train(run_config, toy_csv, out) == 0
    assert model.stat().st_ino == inode
    # later stages find the dataset recorded by train
    assert main(["gen-exact", "--config", str(run_config), "--out", str(out)]) == 0
    assert main(["train", "--config", str(run_config), "--data", str(toy_csv), "--label", "label",
                 "--out", str(out), "--force"]) == 0
    assert model.stat().st_ino != inode


def test_missing_model_names_the_command(tmp_path, toy_csv, capsys):
    config = tmp_path / "run.toml"
    config.write_text(f'k = [1]\n[dataset]\npath = "{toy_csv}"\nlabel_column = "label"\n', encoding="utf-8")
    assert main(["gen-exact", "--config", str(config), "--out", str(tmp_path / "empty")]) == 1
    assert "python main.py train" in capsys.readouterr().err


def test_missing_dataset_is_reported(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "run")]) == 1
    assert "--data" in capsys.readouterr().err


def test_invalid_precision_on_the_command_line(tmp_path, toy_csv, capsys):
    config = tmp_path / "bad.toml"
    config.write_text("k = [7]\n", encoding="utf-8")
    assert _train(config, toy_csv, tmp_path / "run") == 1
    assert "k must be" in capsys.readouterr().err


def test_training_is_reproducible_across_runs(tmp_path, run_config, toy_csv):
    for name in ("a", "b"):
        assert _train(run_config, toy_csv, tmp_path / name) == 0
    for k in (1, 2):
        a = json.loads((tmp_path / "a" / "models" / f"model-k{k}.json").read_text(encoding="utf-8"))
        b = json.loads((tmp_path / "b" / "models" / f"model-k{k}.json").read_text(encoding="utf-8"))
        assert (a["w1"], a["w2"]) == (b["w1"], b["w2"])
