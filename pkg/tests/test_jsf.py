import numpy as np
import pytest
from numpy.testing import assert_allclose

from effdim.errors import DimensionMismatchError, EmbeddingError, InvalidInputError
from effdim.services.jsf import (
    ObservationPair,
    best_match,
    common_subspace,
    compute_jsf,
    default_d,
    generate_spiral,
    kernel_eigenbasis,
    match_functions,
    remove_subspace,
    spearman_abs,
    spiral_map,
    uncommon_directions,
)


@pytest.fixture(scope="module")
def spiral():
    return generate_spiral(300, seed=0)


def test_spiral_map_at_quarter_turn():
    z, y = spiral_map(0.0, 0.0, 0.25)
    assert z[0] == 0.0
    assert_allclose(y[0], [0.0, 11.0 / 24.0], atol=1e-15)


def test_spiral_generation_is_seeded(spiral):
    again = generate_spiral(300, seed=0)
    assert_allclose(again.pair.set1, spiral.pair.set1)
    assert spiral.pair.set1.shape == (300, 2)
    assert spiral.pair.set2.shape == (300, 2)
    assert np.all(np.abs(spiral.c) <= 0.5)
    assert_allclose(spiral.z, spiral.pair.set1[:, 0] + spiral.pair.set1[:, 1] ** 2)
    with pytest.raises(InvalidInputError):
        generate_spiral(0)


def test_observation_pair_validation():
    with pytest.raises(DimensionMismatchError):
        ObservationPair(np.ones((3, 2)), np.ones((4, 2)))
    pair = ObservationPair(np.arange(5.0), np.ones((5, 2)))
    assert pair.set1.shape == (5, 1)
    assert pair.swapped().set1.shape == (5, 2)
    with pytest.raises(InvalidInputError):
        pair.get(3)


def test_remove_subspace_is_an_orthogonal_projection():
    rng = np.random.default_rng(0)
    remove, _ = np.linalg.qr(rng.normal(size=(40, 3)))
    full = rng.normal(size=(40, 5))
    residual = remove_subspace(full, remove)
    assert_allclose(remove.T @ residual, 0.0, atol=1e-12)
    assert_allclose(remove_subspace(residual, remove), residual, atol=1e-12)
    assert_allclose(remove_subspace(remove, remove), 0.0, atol=1e-12)
    assert_allclose(remove_subspace(full, np.zeros((40, 0))), full)
    with pytest.raises(DimensionMismatchError):
        remove_subspace(full, remove[:10])


def test_kernel_eigenbasis_is_orthonormal_and_centered(spiral):
    basis, eps = kernel_eigenbasis(spiral.pair.set1, d=10)
    assert eps > 0
    assert basis.shape[0] == 300 and basis.shape[1] <= 10
    assert_allclose(basis.T @ basis, np.eye(basis.shape[1]), atol=1e-10)
    assert_allclose(basis.sum(axis=0), 0.0, atol=1e-8)
    with pytest.raises(InvalidInputError):
        kernel_eigenbasis(spiral.pair.set1, d=300)
    with pytest.raises(EmbeddingError):
        kernel_eigenbasis(np.ones((20, 2)), d=3)


def test_jointly_smooth_functions(spiral):
    jsf = compute_jsf(spiral.pair, d=10, M=4)
    assert jsf.M == 4
    assert jsf.d == 10
    assert_allclose(jsf.functions.T @ jsf.functions, np.eye(4), atol=1e-10)
    assert np.all(np.diff(jsf.singular_values) <= 1e-12)
    assert jsf.singular_values[0] <= np.sqrt(2.0) + 1e-9
    sidecar = jsf.sidecar()
    assert sidecar["M"] == 4 and len(sidecar["singular_values"]) == len(jsf.singular_values)
    with pytest.raises(InvalidInputError):
        compute_jsf(spiral.pair, d=5, M=50)


def test_first_jsf_tracks_the_shared_variable(spiral):
    jsf = compute_jsf(spiral.pair, d=10, M=3)
    assert spearman_abs(jsf.functions[:, 0], spiral.z) > 0.8


def test_common_subspace_and_uncommon_directions(spiral):
    jsf = compute_jsf(spiral.pair, d=10, M=3)
    phi = common_subspace(jsf, R=6)
    assert phi.shape == (300, 7)
    assert_allclose(phi.T @ phi, np.eye(7), atol=1e-10)
    with pytest.raises(InvalidInputError):
        common_subspace(jsf, R=299)

    uncommon = uncommon_directions(spiral.pair, jsf, R=6, M=2, target_set=2)
    assert uncommon.functions.shape == (300, 2)


def test_default_d():
    assert default_d(50) == 5
    assert default_d(5) == 1
    assert default_d(100_000) == 100


def test_rank_matching_helpers():
    x = np.linspace(0.0, 1.0, 50)
    functions = np.column_stack([np.sin(7 * x), -x ** 3, np.cos(5 * x)])
    index, rho = best_match(functions, x)
    assert index == 1
    assert rho == pytest.approx(1.0)
    pairs = match_functions(np.column_stack([x, np.cos(5 * x)]), functions)
    assert pairs[0][2] == pytest.approx(1.0)
    assert {(i, j) for i, j, _ in pairs} == {(0, 1), (1, 2)}
    assert spearman_abs(np.ones(5), x[:5]) == 0.0
