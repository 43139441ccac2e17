"""
Diffusion-maps service.
Kernel construction, density-normalized spectral embedding, selection of
non-harmonic eigenvectors by local linear regression, and PCA.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist, pdist
from sklearn.decomposition import PCA
from sklearn.preprocessing import StandardScaler

from effdim.config import DEFAULT_C_EXPONENT, DEFAULT_R_CUTOFF, get_config
from effdim.errors import DimensionMismatchError, EmbeddingError, InvalidInputError
from effdim.services.randomness import make_rng

logger = logging.getLogger(__name__)

# Pairs used by the epsilon heuristic before subsampling kicks in
_HEURISTIC_MAX_POINTS = 4000


class KernelVariant(str, Enum):
    PLAIN_INPUT = "PLAIN_INPUT"
    PLAIN_OUTPUT = "PLAIN_OUTPUT"
    OUTPUT_INFORMED_INPUT_OUTPUT = "OUTPUT_INFORMED_INPUT_OUTPUT"


@dataclass(frozen=True)
class KernelSpec:
    variant: KernelVariant
    epsilon: float
    c_exponent: float = DEFAULT_C_EXPONENT

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class Embedding:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    alpha: int
    nonharmonic_indices: List[int] = field(default_factory=list)
    residuals: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def k(self) -> int:
        return self.eigenvectors.shape[1] - 1

    def coordinates(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Eigenvector columns, the selected non-harmonic ones by default."""
        cols = list(self.nonharmonic_indices if indices is None else indices)
        return self.eigenvectors[:, cols]


@dataclass(frozen=True)
class PCASummary:
    singular_values: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


@dataclass(frozen=True)
class BlockScaling:
    """Per-column z-scoring of the output block; inputs are used as given."""
    out_scaler: Optional[StandardScaler] = None

    def outputs(self, f: np.ndarray) -> np.ndarray:
        if self.out_scaler is None:
            return f
        return self.out_scaler.transform(f)


@dataclass(frozen=True)
class KernelContext:
    """Everything needed to evaluate the normalized kernel against new points."""
    spec: KernelSpec
    scaling: BlockScaling
    train_in: Optional[np.ndarray]
    train_out: Optional[np.ndarray]
    alpha: int
    row_sums: np.ndarray
    normalized_row_sums: np.ndarray

    def raw_affinity(self, new_in: Optional[np.ndarray], new_out: Optional[np.ndarray]) -> np.ndarray:
        """Unnormalized kernel between new points (rows) and the training points."""
        new_in = None if new_in is None else np.atleast_2d(np.asarray(new_in, dtype=float))
        new_out = None if new_out is None else self.scaling.outputs(np.atleast_2d(new_out))
        return _kernel(self.spec, new_in, new_out, self.train_in, self.train_out)

    def markov_rows(self, new_in: Optional[np.ndarray], new_out: Optional[np.ndarray]) -> np.ndarray:
        """Rows of the row-stochastic operator for new points, same normalizations as training."""
        a = self.raw_affinity(new_in, new_out)
        if self.alpha:
            p_new = a.sum(axis=1) ** self.alpha
            a = a / p_new[:, None] / (self.row_sums ** self.alpha)[None, :]
        d_new = a.sum(axis=1)
        if np.any(d_new <= 0):
            raise EmbeddingError("new point has zero affinity to every training point")
        return a / d_new[:, None]


def _sq_dists(x: np.ndarray, y: Optional[np.ndarray] = None) -> np.ndarray:
    d = cdist(x, x if y is None else y, "sqeuclidean")
    if not np.all(np.isfinite(d)):
        raise EmbeddingError("non-finite pairwise distances")
    return d


def _kernel(spec: KernelSpec, new_in, new_out, train_in, train_out) -> np.ndarray:
    if spec.variant is KernelVariant.PLAIN_INPUT:
        if new_in is None:
            raise InvalidInputError("PLAIN_INPUT kernel needs input points")
        exponent = _sq_dists(new_in, train_in)
        exponent /= 2.0 * spec.epsilon
    elif spec.variant is KernelVariant.PLAIN_OUTPUT:
        if new_out is None:
            raise InvalidInputError("PLAIN_OUTPUT kernel needs output points")
        exponent = _sq_dists(new_out, train_out)
        exponent /= 2.0 * spec.epsilon
    else:
        if new_in is None or new_out is None:
            raise InvalidInputError("input-output kernel needs both input and output points")
        exponent = _sq_dists(new_in, train_in)
        exponent /= spec.epsilon ** 2
        exponent += _sq_dists(new_out, train_out) / spec.epsilon ** spec.c_exponent
    np.negative(exponent, out=exponent)
    return np.exp(exponent, out=exponent)


def _median_sq_distance(points: np.ndarray, seed: int = 0) -> float:
    if points.shape[0] > _HEURISTIC_MAX_POINTS:
        rows = make_rng(seed, "epsilon_heuristic").choice(points.shape[0], _HEURISTIC_MAX_POINTS, replace=False)
        points = points[rows]
    d2 = pdist(points, "sqeuclidean")
    d2 = d2[d2 > 0]
    if d2.size == 0:
        raise EmbeddingError("all points are identical; no kernel scale can be chosen")
    return float(np.median(d2))


def fit_scaling(points_in: Optional[np.ndarray], points_out: Optional[np.ndarray], spec: KernelSpec) -> BlockScaling:
    """
    Block scaling for a kernel variant.

    Plain kernels use the data as given. The input-output kernel z-scores
    each output column and leaves the inputs in the units they arrive in.
    """
    if spec.variant is not KernelVariant.OUTPUT_INFORMED_INPUT_OUTPUT:
        return BlockScaling()
    if points_out is None:
        raise InvalidInputError("input-output kernel needs both input and output points")
    return BlockScaling(StandardScaler().fit(points_out))


def affinity(points_in: Optional[np.ndarray], points_out: Optional[np.ndarray], spec: KernelSpec) -> np.ndarray:
    """
    Symmetric affinity matrix of a dataset.

    Plain variants use exp(-|x_i - x_j|^2 / 2 eps) on inputs or outputs; the
    input-output variant uses exp(-|dp|^2/eps^2 - |df_z|^2/eps^c) with raw
    inputs and z-scored outputs (see `fit_scaling`).

    Returns:
        np.ndarray: (N, N) affinity with unit diagonal
    """
    return build_kernel_context(points_in, points_out, spec, alpha=0)[1]


def build_kernel_context(points_in: Optional[np.ndarray], points_out: Optional[np.ndarray], spec: KernelSpec,
                         alpha: int = 1) -> Tuple[KernelContext, np.ndarray]:
    """Affinity of the training data together with the context Nystrom needs to reuse it."""
    points_in = None if points_in is None else np.atleast_2d(np.asarray(points_in, dtype=float))
    points_out = None if points_out is None else np.atleast_2d(np.asarray(points_out, dtype=float))
    if points_in is not None and points_out is not None and points_in.shape[0] != points_out.shape[0]:
        raise DimensionMismatchError("input and output blocks have different row counts")
    scaling = fit_scaling(points_in, points_out, spec)
    train_in = points_in
    train_out = None if points_out is None else scaling.outputs(points_out)
    a = _kernel(spec, train_in, train_out, train_in, train_out)
    row_sums = a.sum(axis=1)
    if alpha:
        inv = 1.0 / row_sums ** alpha
        normalized = (a @ inv) * inv
    else:
        normalized = row_sums
    context = KernelContext(spec, scaling, train_in, train_out, alpha, row_sums, normalized)
    return context, a


def epsilon_heuristic(points: np.ndarray, seed: int = 0) -> float:
    """
    Default kernel scale: median of the nonzero pairwise squared distances.

    Above a few thousand points the median is taken over a seeded subsample.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < 2:
        raise InvalidInputError("epsilon heuristic needs at least two points")
    return _median_sq_distance(points, seed)


def epsilon_heuristic_input_output(points_out: np.ndarray, c_exponent: float = DEFAULT_C_EXPONENT) -> float:
    """Scale for the input-output kernel: eps^c equals twice the median squared distance of z-scored outputs."""
    points_out = np.atleast_2d(np.asarray(points_out, dtype=float))
    return float((2.0 * _median_sq_distance(StandardScaler().fit_transform(points_out))) ** (1.0 / c_exponent))


def epsilon_sweep(points: np.ndarray, epsilons: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Kernel sums over a log-spaced range of scales.

    The slope of log sum(A) against log eps estimates half the local
    dimension where the curve is linear.

    Returns:
        Tuple: (epsilons, sum_ij A_ij(eps))
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] > _HEURISTIC_MAX_POINTS:
        rows = make_rng(0, "epsilon_sweep").choice(points.shape[0], _HEURISTIC_MAX_POINTS, replace=False)
        points = points[rows]
    d2 = _sq_dists(points)
    if epsilons is None:
        median = float(np.median(d2[d2 > 0]))
        epsilons = np.logspace(-4, 2, 25) * median
    epsilons = np.asarray(epsilons, dtype=float)
    sums = np.array([np.exp(-d2 / (2.0 * eps)).sum() for eps in epsilons])
    return epsilons, sums


def markov_matrix(a: np.ndarray, alpha: int = 1) -> np.ndarray:
    """Row-stochastic W = D^-1 P^-a A P^-a."""
    p = a.sum(axis=1) ** alpha
    a_tilde = a / p[:, None] / p[None, :]
    return a_tilde / a_tilde.sum(axis=1)[:, None]


def dmaps_embed(affinity_matrix: np.ndarray, alpha: int = 1, k: int = 10,
                max_dense_n: Optional[int] = None) -> Embedding:
    """
    Leading eigenpairs of the diffusion operator.

    The row-stochastic W is never diagonalized directly: its symmetric
    conjugate D^1/2 W D^-1/2 is, and eigenvectors are mapped back with
    D^-1/2. Each eigenvector's largest-magnitude entry is made positive.

    Args:
        affinity_matrix: Symmetric nonnegative (N, N) matrix
        alpha: Density normalization exponent, 0 or 1
        k: Number of nontrivial eigenvectors

    Returns:
        Embedding: k+1 eigenpairs, trivial one first
    """
    a = np.asarray(affinity_matrix, dtype=float)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise DimensionMismatchError("affinity must be square")
    if not 1 <= k < n:
        raise InvalidInputError(f"k must satisfy 1 <= k < N, got k={k}, N={n}")
    if alpha not in (0, 1):
        raise InvalidInputError("alpha must be 0 or 1")
    limit = max_dense_n or get_config()["max_dense_n"]
    if n > limit:
        raise EmbeddingError(f"{n} points exceed the dense eigensolver limit of {limit}; subsample the dataset")
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise EmbeddingError("affinity must be finite and nonnegative")

    p = a.sum(axis=1) ** alpha
    s = a / p[:, None]
    s /= p[None, :]
    d = s.sum(axis=1)
    root_d = np.sqrt(d)
    s /= root_d[:, None]
    s /= root_d[None, :]
    s = 0.5 * (s + s.T)

    try:
        values, vectors = scipy.linalg.eigh(s, subset_by_index=[n - k - 1, n - 1])
    except (np.linalg.LinAlgError, ValueError) as e:
        raise EmbeddingError(f"eigensolver did not converge: {e}")
    residual = float(np.max(np.abs(s @ vectors - vectors * values[None, :])))
    if residual > 1e-6:
        raise EmbeddingError("eigensolver residual too large", residual)

    order = np.argsort(-np.abs(values))
    values = values[order]
    phi = vectors[:, order] / root_d[:, None]
    pivots = np.argmax(np.abs(phi), axis=0)
    phi *= np.sign(phi[pivots, np.arange(phi.shape[1])])[None, :]
    logger.debug(f"DMaps eigenvalues: {np.array2string(values, precision=4)}")
    return Embedding(eigenvalues=values, eigenvectors=phi, alpha=alpha)


def local_linear_residuals(embedding: Embedding, subsample: int = 2000, seed: int = 0,
                           chunk: int = 256) -> np.ndarray:
    """
    Normalized leave-one-out local linear regression residual of every
    eigenvector on the ones before it.

    r_k near 0 means phi_k is a function (a harmonic) of phi_1..phi_{k-1}.
    The trivial eigenvector gets 0 and phi_1 gets 1.
    """
    phi = embedding.eigenvectors
    n, cols = phi.shape
    if n > subsample:
        rows = np.sort(make_rng(seed, "local_linear").choice(n, subsample, replace=False))
        phi = phi[rows]
        n = subsample

    residuals = np.zeros(cols)
    if cols > 1:
        residuals[1] = 1.0
    for k in range(2, cols):
        x = phi[:, 1:k]
        y = phi[:, k]
        d2 = _sq_dists(x)
        eps_reg = np.median(np.sqrt(d2[d2 > 0])) / 3.0 if np.any(d2 > 0) else 1.0
        prediction = np.empty(n)
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            w = np.exp(-d2[start:stop] / eps_reg ** 2)
            w[np.arange(stop - start), np.arange(start, stop)] = 0.0
            design = np.concatenate([np.ones((stop - start, n, 1)),
                                     x[None, :, :] - x[start:stop, None, :]], axis=2)
            weighted = design * w[:, :, None]
            lhs = np.einsum("inp,inq->ipq", weighted, design)
            rhs = np.einsum("inp,n->ip", weighted, y)
            ridge = 1e-10 * np.trace(lhs, axis1=1, axis2=2)[:, None, None] * np.eye(k)[None, :, :]
            coef = np.linalg.solve(lhs + ridge + 1e-12 * np.eye(k)[None, :, :], rhs[:, :, None])[:, :, 0]
            prediction[start:stop] = coef[:, 0]
        residuals[k] = np.sqrt(np.sum((y - prediction) ** 2) / np.sum(y ** 2))
    return residuals


def select_nonharmonic(embedding: Embedding, r_cutoff: float = DEFAULT_R_CUTOFF,
                       residuals: Optional[np.ndarray] = None, **kwargs) -> List[int]:
    """
    Indices of the non-harmonic eigenvectors.

    Args:
        embedding: DMaps result with at least two nontrivial eigenvectors
        r_cutoff: Residual above which an eigenvector counts as new direction
        residuals: Precomputed `local_linear_residuals`, computed when omitted

    Returns:
        List[int]: Sorted indices, always starting with 1
    """
    if embedding.k < 2:
        raise InvalidInputError("selection needs at least two nontrivial eigenvectors")
    if residuals is None:
        residuals = local_linear_residuals(embedding, **kwargs)
    selected = [k for k in range(1, len(residuals)) if k == 1 or residuals[k] > r_cutoff]
    logger.info(f"Non-harmonic eigenvectors {selected} (cutoff {r_cutoff}); "
                f"residuals {np.array2string(residuals[1:], precision=3)}")
    return selected


def annotate_selection(embedding: Embedding, r_cutoff: float = DEFAULT_R_CUTOFF, **kwargs) -> Embedding:
    """Copy of the embedding carrying its residual spectrum and selected indices."""
    residuals = local_linear_residuals(embedding, **kwargs)
    selected = select_nonharmonic(embedding, r_cutoff, residuals=residuals)
    return replace(embedding, nonharmonic_indices=selected, residuals=residuals)


def residual_gap(embedding: Embedding) -> float:
    """Smallest selected residual over the largest rejected one (inf when nothing is rejected)."""
    selected = set(embedding.nonharmonic_indices)
    kept = [embedding.residuals[k] for k in selected]
    rejected = [embedding.residuals[k] for k in range(1, len(embedding.residuals)) if k not in selected]
    if not rejected or max(rejected) == 0:
        return float("inf")
    return float(min(kept) / max(rejected))


def embed_dataset(points_in: Optional[np.ndarray], points_out: Optional[np.ndarray], variant: KernelVariant,
                  epsilon: Optional[float] = None, alpha: int = 1, k: int = 10,
                  r_cutoff: float = DEFAULT_R_CUTOFF, c_exponent: float = DEFAULT_C_EXPONENT,
                  **selection) -> Tuple[Embedding, KernelContext]:
    """
    Kernel, embedding and selection in one call, with the heuristic scale
    when none is given.
    """
    variant = KernelVariant(variant)
    if epsilon is None:
        if variant is KernelVariant.PLAIN_INPUT:
            epsilon = epsilon_heuristic(points_in)
        elif variant is KernelVariant.PLAIN_OUTPUT:
            epsilon = epsilon_heuristic(points_out)
        else:
            epsilon = epsilon_heuristic_input_output(points_out, c_exponent)
    logger.info(f"Kernel {variant.value} with epsilon={epsilon:.4g}, alpha={alpha}")
    spec = KernelSpec(variant, epsilon, c_exponent)
    context, a = build_kernel_context(points_in, points_out, spec, alpha)
    embedding = dmaps_embed(a, alpha, k)
    del a
    return annotate_selection(embedding, r_cutoff, **selection), context


def pca(data: np.ndarray) -> PCASummary:
    """Principal components of the centered data."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] < 2:
        raise InvalidInputError("PCA needs at least two rows")
    model = PCA(svd_solver="full").fit(data)
    # constant data has zero total variance
    ratios = np.nan_to_num(model.explained_variance_ratio_)
    return PCASummary(singular_values=model.singular_values_, components=model.components_,
                      explained_variance_ratio=ratios, mean=model.mean_)


def intrinsic_dimension_pca(data: np.ndarray, variance: float = 0.99, standardize: bool = True) -> int:
    """Smallest number of components whose cumulative explained variance reaches `variance`."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if standardize:
        data = StandardScaler().fit_transform(data)
    ratios = pca(data).explained_variance_ratio
    return int(np.searchsorted(np.cumsum(ratios), variance) + 1)
