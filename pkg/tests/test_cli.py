import json
import logging

import numpy as np
import pytest

from effdim.main import app, main
from effdim.services.storage import ArtifactStore


@pytest.fixture(autouse=True)
def restore_root_handlers():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def _json_output(capsys):
    return json.loads(capsys.readouterr().out)


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.startswith("effdim ")


def test_model_list(capsys):
    assert main(["model", "list"]) == 0
    listing = _json_output(capsys)
    assert listing["count"] == 5
    names = [m["model"] for m in listing["models"]]
    assert "TOY_ENZYME" in names and "COMPARTMENTAL_2" in names


@pytest.mark.parametrize("argv", [
    ["no_such_noun"],
    ["model"],
    ["experiment", "run"],
    ["model", "simulate", "--model", "NOT_A_MODEL", "--times", "0:1:0.5", "--out", "x.csv"],
    ["--log-level", "LOUD", "model", "list"],
])
def test_usage_errors_exit_with_config_code(argv):
    assert main(argv) == 2


def test_default_verb_expansion():
    assert app._expand_default_verb(["dmaps", "--dataset", "d"]) == ["dmaps", "embed", "--dataset", "d"]
    assert app._expand_default_verb(["--log-level", "DEBUG", "sample"]) == ["--log-level", "DEBUG", "sample",
                                                                            "transient"]
    assert app._expand_default_verb(["dmaps", "extend"]) == ["dmaps", "extend"]
    assert app._expand_default_verb(["dmaps", "--help"]) == ["dmaps", "--help"]
    assert app._expand_default_verb(["jsf", "--set1", "a"]) == ["jsf", "--set1", "a"]


def test_experiment_list(capsys):
    assert main(["experiment", "list"]) == 0
    experiments = _json_output(capsys)["experiments"]
    assert len(experiments) == 9
    assert all(e["description"] for e in experiments)


def test_simulate_writes_trajectory(tmp_path, capsys):
    out = tmp_path / "traj.csv"
    assert main(["model", "simulate", "--model", "COMPARTMENTAL_2", "--times", "0:2:0.5", "--out", str(out)]) == 0
    result = _json_output(capsys)
    assert result["model"] == "COMPARTMENTAL_2"
    data, header = ArtifactStore(tmp_path).load_csv("traj.csv")
    assert header[0] == "t"
    assert data.shape[0] == result["times"]
    assert np.all(np.diff(data[:, 0]) > 0)


def test_missing_parameter_file_is_an_input_error(tmp_path):
    argv = ["model", "simulate", "--model", "TOY_ENZYME", "--params", str(tmp_path / "nope.csv"),
            "--times", "0:1:0.5", "--out", str(tmp_path / "t.csv")]
    assert main(argv) == 2


def test_smoke_experiment_and_report(tmp_path, capsys):
    run_dir = tmp_path / "spiral"
    argv = ["experiment", "run", "--experiment", "spiral_jsf", "--count", "120", "--seed", "3",
            "--run-dir", str(run_dir)]
    assert main(argv) == 0
    summary = _json_output(capsys)
    assert summary["status"] == "ok"
    assert summary["seed"] == 3
    assert "spiral.csv" in summary["artifacts"]
    assert (run_dir / "report.txt").exists()

    (run_dir / "report.txt").unlink()
    assert main(["report", "show", "--run", str(run_dir)]) == 0
    assert "spiral_jsf" in capsys.readouterr().out

    assert main(["report", "--run", str(run_dir)]) == 0
    files = _json_output(capsys)["files"]
    assert any(f.endswith("report.json") for f in files)


def test_jsf_spiral_command(tmp_path, capsys):
    assert main(["jsf", "spiral", "-n", "150", "--seed", "1", "--out", str(tmp_path / "spiral")]) == 0
    result = _json_output(capsys)
    assert 0.0 <= result["f1_z_spearman"] <= 1.0
    assert (tmp_path / "spiral" / "spiral.csv").exists()
    assert (tmp_path / "spiral" / "common.csv").exists()
