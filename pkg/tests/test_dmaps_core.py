import numpy as np
import pytest
from numpy.testing import assert_allclose

from effdim.errors import DimensionMismatchError, EmbeddingError, InvalidInputError
from effdim.services.dmaps_core import (
    Embedding,
    KernelSpec,
    KernelVariant,
    affinity,
    annotate_selection,
    build_kernel_context,
    dmaps_embed,
    embed_dataset,
    epsilon_heuristic,
    epsilon_sweep,
    intrinsic_dimension_pca,
    local_linear_residuals,
    markov_matrix,
    pca,
    residual_gap,
    select_nonharmonic,
)


def _circle(n=200):
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([np.cos(theta), np.sin(theta)])


def test_affinity_is_symmetric_with_unit_diagonal():
    points = np.random.default_rng(0).normal(size=(50, 3))
    a = affinity(points, None, KernelSpec(KernelVariant.PLAIN_INPUT, epsilon=1.0))
    assert_allclose(a, a.T)
    assert_allclose(np.diag(a), 1.0)
    assert np.all((a > 0) & (a <= 1.0))


def test_plain_kernels_need_their_block():
    points = np.ones((4, 2)) * np.arange(4)[:, None]
    with pytest.raises(InvalidInputError):
        affinity(points, None, KernelSpec(KernelVariant.PLAIN_OUTPUT, 1.0))
    with pytest.raises(InvalidInputError):
        affinity(points, None, KernelSpec(KernelVariant.OUTPUT_INFORMED_INPUT_OUTPUT, 1.0))
    with pytest.raises(InvalidInputError):
        KernelSpec(KernelVariant.PLAIN_INPUT, 0.0)


def test_markov_matrix_is_row_stochastic():
    points = np.random.default_rng(1).uniform(size=(80, 2))
    a = affinity(points, None, KernelSpec(KernelVariant.PLAIN_INPUT, 0.05))
    for alpha in (0, 1):
        w = markov_matrix(a, alpha)
        assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(w >= 0)


def test_embedding_of_circle():
    points = _circle()
    a = affinity(points, None, KernelSpec(KernelVariant.PLAIN_INPUT, 0.01))
    embedding = dmaps_embed(a, alpha=1, k=4)
    assert embedding.k == 4
    assert embedding.eigenvectors.shape == (200, 5)
    assert embedding.eigenvalues[0] == pytest.approx(1.0, abs=1e-10)
    assert_allclose(embedding.eigenvectors[:, 0], embedding.eigenvectors[0, 0], rtol=1e-8)
    assert np.all(np.diff(np.abs(embedding.eigenvalues)) <= 1e-12)
    # cos/sin pair: degenerate eigenvalues
    assert embedding.eigenvalues[1] == pytest.approx(embedding.eigenvalues[2], rel=1e-6)

    w = markov_matrix(a, 1)
    for j in range(5):
        phi = embedding.eigenvectors[:, j]
        assert_allclose(w @ phi, embedding.eigenvalues[j] * phi, atol=1e-9)
        assert phi[np.argmax(np.abs(phi))] > 0


def test_embed_validates_arguments():
    a = np.eye(5)
    with pytest.raises(InvalidInputError):
        dmaps_embed(a, k=5)
    with pytest.raises(InvalidInputError):
        dmaps_embed(a, alpha=2, k=2)
    with pytest.raises(DimensionMismatchError):
        dmaps_embed(np.ones((3, 4)), k=1)
    with pytest.raises(EmbeddingError):
        dmaps_embed(-np.ones((4, 4)), k=2)
    with pytest.raises(EmbeddingError):
        dmaps_embed(np.ones((6, 6)), k=2, max_dense_n=5)


def test_residuals_find_the_second_direction(strip_grid):
    a = affinity(strip_grid, None, KernelSpec(KernelVariant.PLAIN_INPUT, 0.01))
    embedding = annotate_selection(dmaps_embed(a, alpha=1, k=4))
    residuals = embedding.residuals
    assert residuals[0] == 0.0
    assert residuals[1] == 1.0
    assert residuals[2] < 0.2
    assert residuals[3] > 0.5
    assert embedding.nonharmonic_indices == [1, 3]
    assert residual_gap(embedding) > 1.0


def test_selection_always_keeps_first_eigenvector():
    embedding = Embedding(np.array([1.0, 0.9, 0.8, 0.7]), np.random.default_rng(0).normal(size=(30, 4)), 1)
    residuals = np.array([0.0, 1.0, 0.01, 0.05])
    assert select_nonharmonic(embedding, 0.2, residuals=residuals) == [1]
    with pytest.raises(InvalidInputError):
        select_nonharmonic(Embedding(np.ones(2), np.ones((5, 2)), 1))


def test_residual_gap_without_rejections_is_infinite():
    embedding = Embedding(np.ones(3), np.ones((5, 3)), 1, [1, 2], np.array([0.0, 1.0, 0.9]))
    assert residual_gap(embedding) == float("inf")


def test_local_linear_residuals_subsample_is_seeded(strip_grid):
    a = affinity(strip_grid, None, KernelSpec(KernelVariant.PLAIN_INPUT, 0.01))
    embedding = dmaps_embed(a, alpha=1, k=3)
    first = local_linear_residuals(embedding, subsample=300, seed=4)
    assert_allclose(first, local_linear_residuals(embedding, subsample=300, seed=4))


def test_input_output_kernel_context():
    rng = np.random.default_rng(2)
    params = rng.uniform(1.0, 2.0, size=(60, 3))
    outputs = np.column_stack([params[:, 0] * params[:, 1], params[:, 2]])
    spec = KernelSpec(KernelVariant.OUTPUT_INFORMED_INPUT_OUTPUT, epsilon=1.0)
    context, a = build_kernel_context(params, outputs, spec, alpha=1)
    assert a.shape == (60, 60)
    assert_allclose(a, a.T)
    rows = context.markov_rows(params, outputs)
    assert_allclose(rows, markov_matrix(a, 1), atol=1e-12)
    with pytest.raises(DimensionMismatchError):
        build_kernel_context(params, outputs[:10], spec)


def test_input_output_affinity_matches_formula():
    rng = np.random.default_rng(8)
    params = rng.uniform(0.5, 1.5, size=(25, 2))
    outputs = np.column_stack([params[:, 0] / params[:, 1], 100.0 * params[:, 0]])
    eps, c = 0.7, 4.0
    spec = KernelSpec(KernelVariant.OUTPUT_INFORMED_INPUT_OUTPUT, epsilon=eps, c_exponent=c)

    z = (outputs - outputs.mean(axis=0)) / outputs.std(axis=0)
    dp = np.sum((params[:, None, :] - params[None, :, :]) ** 2, axis=-1)
    df = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    expected = np.exp(-dp / eps ** 2 - df / eps ** c)
    assert_allclose(affinity(params, outputs, spec), expected, rtol=1e-12, atol=1e-14)

    # inputs are not rescaled, so their units show up in the kernel
    assert not np.allclose(affinity(1000.0 * params, outputs, spec), expected)
    assert_allclose(affinity(params, 1000.0 * outputs, spec), expected, rtol=1e-10, atol=1e-14)


def test_embed_dataset_uses_heuristic_scale():
    points = _circle(120)
    embedding, context = embed_dataset(points, None, KernelVariant.PLAIN_INPUT, k=3)
    assert context.spec.epsilon == pytest.approx(epsilon_heuristic(points))
    assert embedding.nonharmonic_indices[0] == 1


def test_epsilon_heuristic_rejects_degenerate_sets():
    with pytest.raises(InvalidInputError):
        epsilon_heuristic(np.ones((1, 2)))
    with pytest.raises(EmbeddingError):
        epsilon_heuristic(np.ones((5, 2)))


def test_epsilon_sweep_slope_reflects_dimension(strip_grid):
    # kernel widths between the grid spacing and the strip width
    eps, sums = epsilon_sweep(strip_grid, np.logspace(-2.3, -1.7, 5))
    slopes = np.diff(np.log(sums)) / np.diff(np.log(eps))
    assert np.all(np.diff(sums) > 0)
    assert 1.5 < 2.0 * np.max(slopes) < 2.2


def test_pca_and_intrinsic_dimension():
    rng = np.random.default_rng(3)
    plane = rng.normal(size=(300, 2)) @ np.array([[1.0, 0.0, 1.0], [0.0, 1.0, -1.0]])
    summary = pca(plane)
    assert summary.explained_variance_ratio.sum() == pytest.approx(1.0)
    assert summary.explained_variance_ratio[2] < 1e-20
    assert intrinsic_dimension_pca(plane, variance=0.99, standardize=False) == 2
    with pytest.raises(InvalidInputError):
        pca(np.ones((1, 3)))
