import json
from datetime import datetime, timedelta

import numpy as np
import pytest

from effdim.config import ExperimentId, parse_experiment_config
from effdim.errors import AcceptanceError, DatasetError
from effdim.services.model_zoo import effectiveness_factor, regime_approximation, regime_of
from effdim.tasks.experiments import PIPELINES, regime_grid, run_experiment
from effdim.tasks.stages import load_manifest


def test_every_experiment_has_a_pipeline():
    assert set(PIPELINES) == set(ExperimentId)
    assert all(func.__doc__ for func in PIPELINES.values())


@pytest.mark.parametrize("regime", [1, 2, 3])
def test_regime_grids_lie_inside_their_regime(regime):
    phi, biot = regime_grid(regime, n=12)
    assert phi.shape == biot.shape == (144,)
    assert np.all(regime_of(phi, biot) == regime)
    eta = effectiveness_factor(phi, biot)
    approx = regime_approximation(regime, phi, biot)
    error = np.abs(eta - approx) / eta if regime != 3 else np.abs(eta - 1.0)
    assert np.max(error) < (1e-3 if regime == 3 else 0.05)


def test_unknown_regime():
    with pytest.raises(ValueError):
        regime_grid(4)


def test_spiral_smoke_run(tmp_path):
    config = parse_experiment_config({"experiment": "spiral_jsf", "seed": 1, "counts": {"n_samples": 150}})
    manifest = run_experiment(config, tmp_path / "spiral")
    assert manifest.status == "ok"
    assert [s.name for s in manifest.stages] == ["configure", "sample", "jsf"]
    assert {c.name for c in manifest.checks} == {"f1_z_spearman", "uncommon_c_spearman"}
    assert all(c.passed is None for c in manifest.checks)
    assert 0.0 <= manifest.metrics["f1_z_spearman"] <= 1.0
    assert "spiral" in manifest.substream_seeds
    assert datetime.fromisoformat(manifest.started_at).utcoffset() == timedelta(0)

    run_dir = tmp_path / "spiral"
    for name in ("resolved_config.json", "manifest.json", "report.json", "report.txt", "spiral.csv",
                 "jsf_sidecar.json", "jsf_correlations.csv"):
        assert (run_dir / name).exists(), name
    assert json.loads((run_dir / "resolved_config.json").read_text())["counts"]["n_samples"] == 150
    assert load_manifest(run_dir).metrics == manifest.metrics


def test_spiral_runs_are_reproducible(tmp_path):
    config = parse_experiment_config({"experiment": "spiral_jsf", "seed": 5, "counts": {"n_samples": 120}})
    first = run_experiment(config, tmp_path / "a", report=False)
    second = run_experiment(config, tmp_path / "b", report=False)
    assert first.metrics == second.metrics
    assert (tmp_path / "a" / "spiral.csv").read_bytes() == (tmp_path / "b" / "spiral.csv").read_bytes()
    assert not (tmp_path / "a" / "report.txt").exists()


def test_failed_checks_raise_after_reporting(tmp_path, monkeypatch):
    def always_fails(ctx):
        """Records one failing check."""
        ctx.check("impossible", 1.0, "<", 0.0)

    monkeypatch.setitem(PIPELINES, ExperimentId.TOY_JSF, always_fails)
    config = parse_experiment_config({"experiment": "toy_jsf"})
    with pytest.raises(AcceptanceError) as info:
        run_experiment(config, tmp_path / "run")
    assert info.value.failed == ["impossible"]
    assert info.value.exit_code == 4
    assert load_manifest(tmp_path / "run").status == "checks_failed"
    assert (tmp_path / "run" / "report.txt").exists()


def test_pipeline_errors_mark_the_run_failed(tmp_path, monkeypatch):
    def broken(ctx):
        """Fails in its first stage."""
        with ctx.stage("sample"):
            raise DatasetError("too many failed integrations")

    monkeypatch.setitem(PIPELINES, ExperimentId.TOY_JSF, broken)
    with pytest.raises(DatasetError):
        run_experiment(parse_experiment_config({"experiment": "toy_jsf"}), tmp_path / "run")
    manifest = load_manifest(tmp_path / "run")
    assert manifest.status == "failed"
    assert manifest.stages[-1].status == "failed"
    assert not (tmp_path / "run" / "report.json").exists()


def test_effectiveness_factor_regimes_smoke(tmp_path):
    config = parse_experiment_config({
        "experiment": "effectiveness_factor_regimes",
        "counts": {"n_samples": 60},
        "training": {"epochs": 5, "hidden_units": 4, "hidden_layers": 1},
        "jsf": {"d": 4, "M": 2},
    })
    manifest = run_experiment(config, tmp_path / "eta")
    regime_checks = [c for c in manifest.checks if c.name.startswith("regime")]
    assert len(regime_checks) == 3
    assert all(c.passed for c in regime_checks)
    assert manifest.metrics["regime2_classified_fraction"] == 1.0
    assert (tmp_path / "eta" / "eta_samples" / "inputs.csv").exists()
