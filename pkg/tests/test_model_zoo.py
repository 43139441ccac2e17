import numpy as np
import pytest
from numpy.testing import assert_allclose

from effdim.errors import DimensionMismatchError, InvalidInputError, UnsupportedModelError
from effdim.services.model_zoo import (
    MODEL_CATALOG,
    MSP_NOMINAL_KAPPA,
    ModelId,
    Observable,
    analytic_effective_params,
    conservation_totals,
    delayed_observable,
    effectiveness_factor,
    evaluate_rhs,
    forward_observations,
    get_spec,
    integrate,
    integrate_batch,
    parse_times,
    regime_approximation,
    regime_of,
    resolve_state_index,
    thiele_biot,
    validate_params,
)


def test_catalog_entries_are_consistent():
    for model_id, spec in MODEL_CATALOG.items():
        assert spec.model_id is model_id
        assert len(spec.base_point) == spec.n_params == len(spec.param_names) == len(spec.param_units)
        assert len(spec.initial_state) == spec.n_states
        assert all(i < max(spec.n_states, 1) for i in spec.observable.indices)


def test_toy_effective_rate_at_base_point():
    k_eff = analytic_effective_params(ModelId.TOY_ENZYME, get_spec(ModelId.TOY_ENZYME).base_point)
    assert_allclose(k_eff, [0.66 * 0.97 * 10000.0 / 17000.0])


def test_msp_base_point_maps_to_nominal_kappa():
    kappa = analytic_effective_params(ModelId.MSP_FULL, get_spec(ModelId.MSP_FULL).base_point)
    assert_allclose(kappa, MSP_NOMINAL_KAPPA, rtol=5e-3)


def test_reduced_model_tracks_full_model_with_analytic_kappa():
    full = get_spec(ModelId.MSP_FULL)
    reduced = get_spec(ModelId.MSP_REDUCED)
    assert_allclose(full.observable.times, np.arange(2.0, 21.0, 2.0))
    assert_allclose(reduced.observable.times, full.observable.times)

    rng = np.random.default_rng(6)
    base = np.asarray(full.base_point)
    params = np.vstack([base, base * rng.uniform(0.9, 1.1, size=(3, 6))])
    kappa = np.array([analytic_effective_params(ModelId.MSP_FULL, p) for p in params])
    s2_full, failed_full = forward_observations(ModelId.MSP_FULL, params)
    s2_reduced, failed_reduced = forward_observations(ModelId.MSP_REDUCED, kappa)
    assert failed_full == failed_reduced == []
    assert_allclose(s2_reduced, s2_full, rtol=0.02)


def test_compartmental_identifiable_combinations():
    beta = analytic_effective_params(ModelId.COMPARTMENTAL_2, [1.0, 2.0, 3.0, 4.0])
    assert_allclose(beta, [3.0, 7.0, 8.0])


def test_validate_params_rejects_bad_vectors():
    with pytest.raises(InvalidInputError):
        validate_params(ModelId.TOY_ENZYME, [1.0, 0.0, 1.0])
    with pytest.raises(InvalidInputError):
        validate_params(ModelId.TOY_ENZYME, [1.0, np.nan, 1.0])
    with pytest.raises(DimensionMismatchError):
        validate_params(ModelId.TOY_ENZYME, [1.0, 1.0])


def test_algebraic_model_has_no_rhs():
    with pytest.raises(UnsupportedModelError):
        evaluate_rhs(ModelId.EFFECTIVENESS_FACTOR, np.zeros(0), [1.0, 1.0])
    with pytest.raises(UnsupportedModelError):
        integrate(ModelId.EFFECTIVENESS_FACTOR, [1.0, 1.0], np.zeros(0), [0.0, 1.0])


def test_rhs_conserves_totals():
    spec = get_spec(ModelId.MSP_FULL)
    state = np.array([3.0, 0.2, 0.1, 1.0, 0.7, 0.36])
    rate = evaluate_rhs(ModelId.MSP_FULL, state, spec.base_point)
    assert rate[0] + rate[1] + rate[2] + rate[3] + rate[4] == pytest.approx(0.0, abs=1e-9)
    assert rate[5] + rate[1] + rate[2] == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("model", [ModelId.TOY_ENZYME, ModelId.MSP_FULL])
def test_trajectories_conserve_substrate_and_enzyme(model):
    spec = get_spec(model)
    traj = integrate(model, spec.base_point, spec.initial_state, np.arange(0.0, 11.0, 1.0),
                     rtol=1e-10, atol=1e-12, method="LSODA")
    totals = conservation_totals(model, traj.states)
    assert_allclose(totals, np.repeat(totals[:1], len(totals), axis=0), atol=1e-6)
    assert np.all(traj.states >= -1e-8)


def test_integrate_rejects_bad_grids():
    spec = get_spec(ModelId.COMPARTMENTAL_2)
    with pytest.raises(InvalidInputError):
        integrate(ModelId.COMPARTMENTAL_2, spec.base_point, spec.initial_state, [0.5, 1.0])
    with pytest.raises(InvalidInputError):
        integrate(ModelId.COMPARTMENTAL_2, spec.base_point, spec.initial_state, [0.0, 1.0, 1.0])


def test_compartmental_solution_matches_closed_form():
    # p = 1: x1' = -2 x1 + x2, x2' = x1 - 2 x2, x1(0) = 1
    spec = get_spec(ModelId.COMPARTMENTAL_2)
    times = np.linspace(0.0, 3.0, 7)
    traj = integrate(ModelId.COMPARTMENTAL_2, spec.base_point, spec.initial_state, times)
    expected = 0.5 * (np.exp(-times) + np.exp(-3.0 * times))
    assert_allclose(traj.states[:, 0], expected, rtol=1e-6, atol=1e-9)


def test_batch_integration_matches_single_runs():
    spec = get_spec(ModelId.COMPARTMENTAL_2)
    params = np.array([[1.0, 1.0, 1.0, 1.0], [0.5, 2.0, 1.5, 0.3], [3.0, 0.2, 0.7, 1.1]])
    grid = np.linspace(0.0, 5.0, 11)
    states, failed = integrate_batch(ModelId.COMPARTMENTAL_2, params, spec.initial_state, grid, batch_size=2)
    assert failed == []
    for row, p in enumerate(params):
        single = integrate(ModelId.COMPARTMENTAL_2, p, spec.initial_state, grid)
        assert_allclose(states[row], single.states, rtol=1e-6, atol=1e-9)


def test_forward_observations_shapes():
    spec = get_spec(ModelId.COMPARTMENTAL_2)
    outputs, failed = forward_observations(ModelId.COMPARTMENTAL_2, np.array([spec.base_point] * 3))
    assert failed == []
    assert outputs.shape == (3, spec.observable.size)

    eta, failed = forward_observations(ModelId.EFFECTIVENESS_FACTOR, [[1.0, 10.0], [100.0, 1.0]])
    assert eta.shape == (2, 1)
    assert_allclose(eta[:, 0], effectiveness_factor(np.array([1.0, 100.0]), np.array([10.0, 1.0])))


def test_effectiveness_factor_limits_and_continuity():
    assert isinstance(effectiveness_factor(0.5, 2.0), float)
    assert effectiveness_factor(1e-6, 1e6) == pytest.approx(1.0, abs=1e-9)
    below = effectiveness_factor(0.999e-3, 10.0)
    above = effectiveness_factor(1.001e-3, 10.0)
    assert abs(below - above) < 1e-8
    assert effectiveness_factor(1e4, 1e8) == pytest.approx(1e-4, rel=1e-3)
    with pytest.raises(InvalidInputError):
        effectiveness_factor(-1.0, 1.0)


def test_regime_labels():
    assert regime_of(1e4, 1e-2) == 1
    assert regime_of(1e2, 1e6) == 2
    assert regime_of(1e-3, 1.0) == 3
    assert regime_of(1.0, 1.0) == 0
    labels = regime_of(np.array([1e4, 1e2]), np.array([1e-2, 1e6]))
    assert labels.tolist() == [1, 2]


def test_regime_approximations():
    assert regime_approximation(1, 100.0, 1.0) == pytest.approx(1e-4)
    assert regime_approximation(2, 100.0, 1e6) == pytest.approx(1e-2)
    assert_allclose(regime_approximation(3, np.array([1e-3, 1e-4]), 1.0), [1.0, 1.0])
    with pytest.raises(InvalidInputError):
        regime_approximation(4, 1.0, 1.0)


def test_thiele_biot_groups():
    phi, biot = thiele_biot(k=4.0, radius=2.0, diffusivity=1.0, mass_transfer=3.0)
    assert phi == pytest.approx(4.0)
    assert biot == pytest.approx(6.0)


def test_state_names_and_times():
    assert resolve_state_index(ModelId.TOY_ENZYME, "S1") == 2
    assert resolve_state_index(ModelId.TOY_ENZYME, "1") == 1
    with pytest.raises(InvalidInputError):
        resolve_state_index(ModelId.TOY_ENZYME, "S9")
    assert parse_times("0:1:0.5") == (0.0, 0.5, 1.0)
    assert parse_times("0,2,4") == (0.0, 2.0, 4.0)
    with pytest.raises(InvalidInputError):
        parse_times("0:1")


def test_delayed_observable_round_trips():
    observable = delayed_observable(ModelId.MSP_FULL, ["S2", "S1"], n_delays=3, stride=2.0)
    assert observable.indices == (4, 3)
    assert observable.times == (2.0, 4.0, 6.0)
    assert observable.size == 6
    assert Observable.from_dict(observable.to_dict()) == observable
