"""
Full-size experiment runs. Each takes minutes to hours; run with `pytest -m slow`.
A run that misses one of its built-in checks raises AcceptanceError.
"""

import pytest

from effdim.config import parse_experiment_config
from effdim.tasks.experiments import run_experiment

pytestmark = pytest.mark.slow


def _run(tmp_path, experiment, **overrides):
    data = {"experiment": experiment, "seed": 0}
    data.update(overrides)
    manifest = run_experiment(parse_experiment_config(data), tmp_path / experiment)
    assert manifest.status == "ok"
    assert all(c.passed is not False for c in manifest.checks)
    return manifest


def test_spiral_common_and_uncommon_functions(tmp_path):
    manifest = _run(tmp_path, "spiral_jsf")
    assert manifest.metrics["f1_z_spearman"] > 0.98
    assert manifest.metrics["uncommon_c_spearman"] > 0.95


def test_compartmental_effective_parameters(tmp_path):
    manifest = _run(tmp_path, "compartmental_full")
    assert manifest.metrics["nullspace_dim"] == 1
    assert manifest.metrics["nonharmonic_count"] == 3
    assert manifest.metrics["optimization_dim"] == 1


def test_msp_dimension_count(tmp_path):
    manifest = _run(tmp_path, "msp_dimension_count")
    assert manifest.metrics["nonharmonic_count"] == 3
    assert manifest.metrics["dimension_sum"] == 6


def test_msp_phi_to_kappa(tmp_path):
    manifest = _run(tmp_path, "msp_phi_to_kappa")
    assert len(manifest.metrics["gh_train_mape"]) == 3


def test_msp_behavior_prediction(tmp_path):
    manifest = _run(tmp_path, "msp_behavior_prediction")
    assert manifest.metrics["s2_t10_max_relative_error"] <= 5e-3


def test_msp_parameter_estimation(tmp_path):
    _run(tmp_path, "msp_parameter_estimation")


@pytest.mark.parametrize("base", ["k1", "k2"])
def test_toy_cae_level_sets(tmp_path, base):
    manifest = _run(tmp_path, "toy_cae_levelsets", regime={"base": base})
    assert manifest.metrics["nu1_keff_spearman"] > 0.99


def test_toy_jsf(tmp_path):
    manifest = _run(tmp_path, "toy_jsf")
    assert manifest.metrics["f1_keff_spearman"] > 0.98


def test_effectiveness_factor_regimes(tmp_path):
    manifest = _run(tmp_path, "effectiveness_factor_regimes")
    assert manifest.metrics["nu1_eta_spearman"] > 0.99
