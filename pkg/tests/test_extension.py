import numpy as np
import pytest
from numpy.testing import assert_allclose

from effdim.errors import DimensionMismatchError, ExtensionError, InvalidInputError
from effdim.services.dmaps_core import Embedding, KernelSpec, KernelVariant, build_kernel_context, dmaps_embed
from effdim.services.extension import (
    double_dmaps_fit,
    double_dmaps_fit_coords,
    gh_eval,
    gh_fit,
    gh_gradient,
    gh_gradient_check,
    nystrom_extend,
    training_reconstruction_error,
)


def _bump(points):
    return np.sin(np.pi * points[:, 0]) * np.cos(np.pi * points[:, 1])


@pytest.fixture
def square_points():
    return np.random.default_rng(11).uniform(0.0, 1.0, size=(200, 2))


def test_nystrom_reproduces_training_eigenvectors(square_points):
    spec = KernelSpec(KernelVariant.PLAIN_INPUT, epsilon=0.05)
    context, a = build_kernel_context(square_points, None, spec, alpha=1)
    embedding = dmaps_embed(a, alpha=1, k=3)
    result = nystrom_extend(embedding, context, new_in=square_points, indices=[1, 2, 3])
    assert result.indices == (1, 2, 3)
    assert_allclose(result.coords, embedding.eigenvectors[:, 1:], atol=1e-8)


def test_nystrom_is_continuous_near_training_points(square_points):
    spec = KernelSpec(KernelVariant.PLAIN_INPUT, epsilon=0.05)
    context, a = build_kernel_context(square_points, None, spec, alpha=1)
    embedding = dmaps_embed(a, alpha=1, k=2)
    nudged = square_points[:5] + 1e-6
    result = nystrom_extend(embedding, context, new_in=nudged, indices=[1, 2])
    assert_allclose(result.coords, embedding.eigenvectors[:5, 1:], atol=1e-4)


def test_nystrom_skips_vanishing_eigenvalues(caplog):
    embedding = Embedding(np.array([1.0, 0.0]), np.ones((4, 2)), 1, [1])
    spec = KernelSpec(KernelVariant.PLAIN_INPUT, epsilon=1.0)
    context, _ = build_kernel_context(np.arange(4.0)[:, None], None, spec)
    with pytest.raises(ExtensionError):
        nystrom_extend(embedding, context, new_in=np.zeros((1, 1)))
    assert "excluded from Nystrom extension" in caplog.text


def test_gh_interpolates_smooth_function(square_points):
    values = _bump(square_points)
    model = gh_fit(square_points, values, epsilon=0.05)
    assert model.n_outputs == 1
    assert training_reconstruction_error(model, values) < 1e-2

    grid = np.random.default_rng(12).uniform(0.2, 0.8, size=(50, 2))
    assert np.max(np.abs(gh_eval(model, grid)[:, 0] - _bump(grid))) < 0.05


@pytest.mark.parametrize("normalized", [True, False])
def test_gh_gradient_matches_finite_differences(square_points, normalized):
    values = np.column_stack([_bump(square_points), square_points[:, 0] ** 2])
    model = gh_fit(square_points, values, epsilon=0.05, normalized=normalized)
    points = np.random.default_rng(13).uniform(0.2, 0.8, size=(20, 2))
    assert gh_gradient(model, points).shape == (20, 2, 2)
    assert gh_gradient_check(model, points) < 1e-4


def test_gh_defaults_to_plain_gaussian_basis(square_points):
    model = gh_fit(square_points[:40], _bump(square_points[:40]), epsilon=0.05)
    assert not model.normalized
    a = model.kernel(square_points[:40])
    sigma = model.basis_eigvals
    assert_allclose(a @ model.basis_eigvecs, model.basis_eigvecs * sigma[None, :], atol=1e-9)
    assert_allclose(np.linalg.eigvalsh(a)[::-1][:sigma.size], sigma, atol=1e-9)


def test_normalized_gh_reproduces_constants(square_points):
    model = gh_fit(square_points, np.full(200, 3.0), epsilon=0.05, normalized=True)
    assert_allclose(gh_eval(model, np.array([[0.5, 0.5], [1.5, -0.2]])), 3.0, atol=1e-6)


def test_gh_fit_validation(square_points):
    with pytest.raises(DimensionMismatchError):
        gh_fit(square_points, np.ones(10))
    with pytest.raises(InvalidInputError):
        gh_fit(square_points, np.ones(200), delta=1.5)
    with pytest.raises(InvalidInputError):
        gh_fit(square_points[:1], np.ones(1))
    model = gh_fit(square_points, np.ones(200), epsilon=0.05)
    with pytest.raises(DimensionMismatchError):
        gh_eval(model, np.ones((3, 3)))


def test_double_dmaps_on_selected_coordinates(square_points):
    spec = KernelSpec(KernelVariant.PLAIN_INPUT, epsilon=0.05)
    _, a = build_kernel_context(square_points, None, spec)
    embedding = dmaps_embed(a, alpha=1, k=3)
    with pytest.raises(ExtensionError):
        double_dmaps_fit(embedding, square_points)

    embedding.nonharmonic_indices = [1, 2]
    targets = np.cos(np.pi * square_points)
    model = double_dmaps_fit(embedding, targets, target_names=("cx", "cy"))
    assert model.target_names == ("cx", "cy")
    coords = embedding.coordinates()
    assert coords.shape == (200, 2)
    assert training_reconstruction_error(model.inner, targets) < 0.05
    assert model.jacobian(coords[:3]).shape == (3, 2, 2)


def test_double_dmaps_on_raw_coordinates(square_points):
    targets = square_points[:, :1] + square_points[:, 1:]
    model = double_dmaps_fit_coords(square_points, targets)
    assert model.inner.normalized
    assert training_reconstruction_error(model.inner, targets) < 1e-2
