from datetime import datetime, timedelta

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from effdim.errors import DatasetError, DimensionMismatchError, InvalidInputError
from effdim.services.dataset_factory import (
    Dataset,
    SamplingMode,
    SamplingPlan,
    build_transient_dataset,
    fit_to_reference,
    level_set_deviation,
    sample_parameters,
    train_test_split,
)
from effdim.services.model_zoo import ModelId, analytic_effective_params, effectiveness_factor, forward_observations


def test_sampling_is_seeded_and_bounded():
    plan = SamplingPlan((1.0, 10.0, 100.0), SamplingMode.UNIFORM_FRACTION, 0.1, 500, seed=3)
    first = sample_parameters(plan)
    assert first.shape == (500, 3)
    assert_array_equal(first, sample_parameters(plan))
    ratio = first / np.array(plan.base_point)
    assert np.all((ratio >= 0.9) & (ratio <= 1.1))

    other_stream = SamplingPlan(plan.base_point, plan.mode, 0.1, 500, seed=3, stream="other")
    assert not np.allclose(first, sample_parameters(other_stream))


def test_log_uniform_sampling_per_coordinate_width():
    plan = SamplingPlan((1.0, 1.0), SamplingMode.LOG_UNIFORM_RANGE, (1.0, 3.0), 2000, seed=0)
    decades = np.log10(sample_parameters(plan))
    assert np.all(np.abs(decades[:, 0]) <= 1.0)
    assert np.all(np.abs(decades[:, 1]) <= 3.0)
    assert np.max(np.abs(decades[:, 1])) > 2.5


def test_log_uniform_decades_are_uniform():
    plan = SamplingPlan((1.0,), SamplingMode.LOG_UNIFORM_RANGE, 3.0, 1000, seed=0)
    decades = np.log10(sample_parameters(plan)[:, 0])
    result = stats.kstest(decades, stats.uniform(loc=-3.0, scale=6.0).cdf)
    assert result.statistic < 0.05


def test_sampling_plan_validation():
    with pytest.raises(InvalidInputError):
        SamplingPlan((1.0,), SamplingMode.UNIFORM_FRACTION, 1.0, 10, 0)
    with pytest.raises(InvalidInputError):
        SamplingPlan((0.0, 1.0), SamplingMode.UNIFORM_FRACTION, 0.1, 10, 0)
    with pytest.raises(InvalidInputError):
        SamplingPlan((1.0,), SamplingMode.LOG_UNIFORM_RANGE, 0.0, 10, 0)
    with pytest.raises(InvalidInputError):
        SamplingPlan((1.0,), SamplingMode.UNIFORM_FRACTION, 0.1, 0, 0)


def test_train_test_split_partitions_rows():
    train, test = train_test_split(100, 20, seed=1)
    assert len(test) == 20 and len(train) == 80
    assert_array_equal(np.sort(np.concatenate([train, test])), np.arange(100))
    again_train, again_test = train_test_split(100, 0.2, seed=1)
    assert_array_equal(test, again_test)
    assert_array_equal(train, again_train)
    other_train, _ = train_test_split(100, 20, seed=1, stream="other")
    assert not np.array_equal(train, other_train)
    all_rows, no_rows = train_test_split(10, 0, seed=0)
    assert_array_equal(all_rows, np.arange(10))
    assert no_rows.size == 0
    with pytest.raises(InvalidInputError):
        train_test_split(10, 10, seed=0)


def test_dataset_validation():
    with pytest.raises(DimensionMismatchError):
        Dataset(np.ones((3, 2)), np.ones((2, 1)))
    with pytest.raises(DatasetError):
        Dataset(np.ones((2, 2)), np.array([1.0, np.inf]))
    data = Dataset(np.arange(6.0).reshape(3, 2), np.arange(3.0))
    assert data.outputs.shape == (3, 1)
    assert len(data.subset([0, 2])) == 2


def test_transient_dataset_for_algebraic_model():
    plan = SamplingPlan((100.0, 100.0), SamplingMode.LOG_UNIFORM_RANGE, (4.0, 6.0), 300, seed=2)
    dataset = build_transient_dataset(ModelId.EFFECTIVENESS_FACTOR, plan)
    assert len(dataset) == 300
    assert_allclose(dataset.outputs[:, 0], effectiveness_factor(dataset.inputs[:, 0], dataset.inputs[:, 1]))
    assert dataset.meta["kind"] == "transient"
    assert dataset.meta["dropped_indices"] == []
    assert datetime.fromisoformat(dataset.meta["created_at"]).utcoffset() == timedelta(0)


def test_transient_dataset_for_ode_model():
    plan = SamplingPlan((1.0, 1.0, 1.0, 1.0), SamplingMode.UNIFORM_FRACTION, 0.5, 40, seed=5)
    dataset = build_transient_dataset(ModelId.COMPARTMENTAL_2, plan)
    assert dataset.inputs.shape == (40, 4)
    assert dataset.outputs.shape == (40, 10)
    assert np.all(np.diff(dataset.outputs, axis=1) < 0)


def test_fit_recovers_identifiable_combinations():
    truth = np.array([1.0, 1.0, 1.0, 1.0])
    integrator = {"method": "LSODA", "rtol": 1e-10, "atol": 1e-12}
    reference = forward_observations(ModelId.COMPARTMENTAL_2, truth, **integrator)[0][0]
    start = np.array([1.3, 0.8, 1.2, 0.7])
    result = fit_to_reference(ModelId.COMPARTMENTAL_2, reference, start, **integrator)
    assert result.objective_value < 1e-8
    assert_allclose(analytic_effective_params(ModelId.COMPARTMENTAL_2, result.argmin),
                    analytic_effective_params(ModelId.COMPARTMENTAL_2, truth), rtol=1e-3)


def test_fit_rejects_wrong_reference_length():
    with pytest.raises(DimensionMismatchError):
        fit_to_reference(ModelId.COMPARTMENTAL_2, np.ones(3), np.ones(4))


def test_level_set_deviation():
    data = Dataset(np.ones((2, 2)), np.array([[1.0, 1.0], [4.0, 5.0]]))
    assert_allclose(level_set_deviation(data, [1.0, 1.0]), [0.0, 5.0])
