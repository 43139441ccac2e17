"""
Out-of-sample extension service.
Nystrom restriction of new points into an existing embedding, Geometric
Harmonics interpolation with closed-form gradients, and the Double-DMaps
composition that maps data-driven coordinates to named targets.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from effdim.config import DEFAULT_DELTA
from effdim.errors import DimensionMismatchError, ExtensionError, InvalidInputError
from effdim.services.dmaps_core import Embedding, KernelContext, epsilon_heuristic

logger = logging.getLogger(__name__)

# Eigenvalues below this magnitude cannot be Nystrom-extended
MIN_EIGENVALUE = 1e-12
# New points per block when evaluating against large training sets
_EVAL_CHUNK = 1024


class NystromResult(NamedTuple):
    coords: np.ndarray
    indices: Tuple[int, ...]


def nystrom_extend(embedding: Embedding, context: KernelContext, new_in: Optional[np.ndarray] = None,
                   new_out: Optional[np.ndarray] = None,
                   indices: Optional[Sequence[int]] = None) -> NystromResult:
    """
    Restrict new points into an embedding.

    phi_b(x) = (1/lambda_b) sum_i W(x, x_i) phi_b(x_i), with W rebuilt using
    the kernel, scale and normalizations stored in `context`.

    Args:
        embedding: Embedding the context was built for
        context: Kernel context of the training data
        new_in, new_out: New input/output rows, as the kernel variant requires
        indices: Eigenvector columns to extend; the selected ones by default

    Returns:
        NystromResult: (M, len(indices)) coordinates and the indices kept
    """
    indices = list(embedding.nonharmonic_indices if indices is None else indices)
    kept = []
    for b in indices:
        if abs(embedding.eigenvalues[b]) < MIN_EIGENVALUE:
            logger.warning(f"Eigenvector {b} has |lambda| < {MIN_EIGENVALUE:g}; excluded from Nystrom extension")
        else:
            kept.append(b)
    if not kept:
        raise ExtensionError("no eigenvector with a usable eigenvalue to extend")

    n_new = np.atleast_2d(new_in if new_in is not None else new_out).shape[0]
    coords = np.empty((n_new, len(kept)))
    phi = embedding.eigenvectors[:, kept] / embedding.eigenvalues[kept][None, :]
    for start in range(0, n_new, _EVAL_CHUNK):
        stop = min(start + _EVAL_CHUNK, n_new)
        block_in = None if new_in is None else np.atleast_2d(new_in)[start:stop]
        block_out = None if new_out is None else np.atleast_2d(new_out)[start:stop]
        coords[start:stop] = context.markov_rows(block_in, block_out) @ phi
    return NystromResult(coords, tuple(kept))


@dataclass(frozen=True)
class GHModel:
    """Geometric Harmonics interpolant.

    With `normalized` the basis comes from the row-normalized (alpha=0)
    kernel, which reproduces constants exactly; otherwise from the plain
    Gaussian kernel.
    """
    train_coords: np.ndarray
    epsilon: float
    delta: float
    normalized: bool
    basis_eigvals: np.ndarray
    basis_eigvecs: np.ndarray
    coefficients: np.ndarray
    weights: np.ndarray

    @property
    def n_outputs(self) -> int:
        return self.coefficients.shape[1]

    def kernel(self, new_coords: np.ndarray) -> np.ndarray:
        d2 = cdist(np.atleast_2d(new_coords), self.train_coords, "sqeuclidean")
        return np.exp(-d2 / (2.0 * self.epsilon))

    def predict(self, new_coords: np.ndarray) -> np.ndarray:
        return gh_eval(self, new_coords)

    def jacobian(self, new_coords: np.ndarray) -> np.ndarray:
        return gh_gradient(self, new_coords)


def gh_fit(coords: np.ndarray, values: np.ndarray, epsilon: Optional[float] = None,
           delta: float = DEFAULT_DELTA, normalized: bool = False) -> GHModel:
    """
    Fit a Geometric Harmonics interpolant.

    Args:
        coords: (N, d) training coordinates
        values: (N,) or (N, n_out) function values; all columns share one basis
        epsilon: Kernel scale of exp(-|x - y|^2 / 2 eps); median heuristic when omitted
        delta: Modes with sigma <= delta * sigma_0 are dropped
        normalized: Use the row-normalized kernel basis instead of the plain Gaussian one

    Returns:
        GHModel: Immutable fitted model
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    n = coords.shape[0]
    if n < 2:
        raise InvalidInputError("GH needs at least two training points")
    if values.shape[0] != n:
        raise DimensionMismatchError(f"{n} coordinates but {values.shape[0]} values")
    if not 0 < delta < 1:
        raise InvalidInputError(f"delta must lie in (0, 1), got {delta}")
    epsilon = epsilon or epsilon_heuristic(coords)

    a = np.exp(-cdist(coords, coords, "sqeuclidean") / (2.0 * epsilon))
    if normalized:
        root_d = np.sqrt(a.sum(axis=1))
        a /= root_d[:, None]
        a /= root_d[None, :]
    sigma, v = scipy.linalg.eigh(a)
    sigma, v = sigma[::-1], v[:, ::-1]
    keep = sigma > delta * sigma[0]
    if not np.any(keep):
        raise ExtensionError("no Geometric Harmonics mode survives the truncation; increase delta or epsilon")
    sigma, v = sigma[keep], v[:, keep]

    if normalized:
        psi = v / root_d[:, None]
        coefficients = v.T @ (values * root_d[:, None])
    else:
        psi = v
        coefficients = v.T @ values
    weights = (psi / sigma[None, :]) @ coefficients
    logger.info(f"GH fit on {n} points: epsilon={epsilon:.4g}, delta={delta:g}, {sigma.size} modes retained")
    return GHModel(coords, float(epsilon), float(delta), normalized, sigma, psi, coefficients, weights)


def gh_eval(model: GHModel, new_coords: np.ndarray) -> np.ndarray:
    """
    Evaluate the extension at new coordinates.

    Returns:
        np.ndarray: (M, n_out) values
    """
    new_coords = np.atleast_2d(np.asarray(new_coords, dtype=float))
    if new_coords.shape[1] != model.train_coords.shape[1]:
        raise DimensionMismatchError(
            f"model has {model.train_coords.shape[1]} coordinates, got {new_coords.shape[1]}")
    out = np.empty((new_coords.shape[0], model.n_outputs))
    for start in range(0, new_coords.shape[0], _EVAL_CHUNK):
        stop = min(start + _EVAL_CHUNK, new_coords.shape[0])
        k = model.kernel(new_coords[start:stop])
        if model.normalized:
            k /= k.sum(axis=1)[:, None]
        out[start:stop] = k @ model.weights
    return out


def gh_gradient(model: GHModel, new_coords: np.ndarray) -> np.ndarray:
    """
    Closed-form derivative of `gh_eval`.

    Each kernel term contributes -(x - x_i)/eps * A(x, x_i); the normalized
    basis adds the derivative of the row sum.

    Returns:
        np.ndarray: (M, n_out, d) Jacobians
    """
    new_coords = np.atleast_2d(np.asarray(new_coords, dtype=float))
    x_train = model.train_coords
    m, dim = new_coords.shape
    if dim != x_train.shape[1]:
        raise DimensionMismatchError(f"model has {x_train.shape[1]} coordinates, got {dim}")
    grads = np.empty((m, model.n_outputs, dim))
    for start in range(0, m, _EVAL_CHUNK):
        stop = min(start + _EVAL_CHUNK, m)
        x = new_coords[start:stop]
        a = model.kernel(x)
        if model.normalized:
            d = a.sum(axis=1)
            values = (a @ model.weights) / d[:, None]
            centered = model.weights[None, :, :] - values[:, None, :]
            weighted_sum = np.einsum("mi,mio->mo", a, centered)
            weighted_x = np.einsum("mi,mio,id->mod", a, centered, x_train)
            grads[start:stop] = -(weighted_sum[:, :, None] * x[:, None, :] - weighted_x) / (model.epsilon * d[:, None, None])
        else:
            weighted_sum = a @ model.weights
            weighted_x = np.stack([(a * model.weights[:, o][None, :]) @ x_train
                                   for o in range(model.n_outputs)], axis=1)
            grads[start:stop] = -(weighted_sum[:, :, None] * x[:, None, :] - weighted_x) / model.epsilon
    return grads


def gh_gradient_check(model: GHModel, points: np.ndarray, step: float = 1e-5) -> float:
    """Largest relative deviation of `gh_gradient` from central finite differences."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    analytic = gh_gradient(model, points)
    numeric = np.empty_like(analytic)
    for j in range(points.shape[1]):
        shift = np.zeros(points.shape[1])
        shift[j] = step
        numeric[:, :, j] = (gh_eval(model, points + shift) - gh_eval(model, points - shift)) / (2.0 * step)
    scale = np.maximum(np.abs(numeric), np.max(np.abs(numeric)) * 1e-3 + 1e-12)
    return float(np.max(np.abs(analytic - numeric) / scale))


def training_reconstruction_error(model: GHModel, values: np.ndarray) -> float:
    """Relative l2 error of the model on its own training points."""
    values = np.asarray(values, dtype=float).reshape(model.train_coords.shape[0], -1)
    fitted = gh_eval(model, model.train_coords)
    return float(np.linalg.norm(fitted - values) / max(np.linalg.norm(values), 1e-300))


@dataclass(frozen=True)
class DoubleDMapsModel:
    """GH on a complete row-normalized basis over selected DMaps coordinates."""
    inner: GHModel
    target_names: Tuple[str, ...] = ()

    def predict(self, coords: np.ndarray) -> np.ndarray:
        return gh_eval(self.inner, coords)

    def jacobian(self, coords: np.ndarray) -> np.ndarray:
        return gh_gradient(self.inner, coords)


def double_dmaps_fit_coords(coords: np.ndarray, targets: np.ndarray, epsilon: Optional[float] = None,
                            delta: float = DEFAULT_DELTA,
                            target_names: Sequence[str] = ()) -> DoubleDMapsModel:
    """Second DMaps (alpha=0, plain Gaussian, no harmonic pruning) on `coords`, then GH of `targets`."""
    inner = gh_fit(coords, targets, epsilon=epsilon, delta=delta, normalized=True)
    return DoubleDMapsModel(inner, tuple(target_names))


def double_dmaps_fit(embedding: Embedding, targets: np.ndarray, epsilon: Optional[float] = None,
                     delta: float = DEFAULT_DELTA, rows: Optional[Sequence[int]] = None,
                     target_names: Sequence[str] = ()) -> DoubleDMapsModel:
    """
    Double DMaps on an embedding's selected non-harmonic coordinates.

    Args:
        embedding: Embedding with a non-empty selection
        targets: (N, n_out) functions to extend, row-aligned with the embedding
            (or with `rows` when given)
        rows: Optional training subset of embedding rows

    Returns:
        DoubleDMapsModel: Maps phi coordinates to the targets
    """
    if not embedding.nonharmonic_indices:
        raise ExtensionError("embedding has no selected non-harmonic coordinates")
    coords = embedding.coordinates()
    if rows is not None:
        coords = coords[np.asarray(rows, dtype=int)]
    return double_dmaps_fit_coords(coords, targets, epsilon, delta, target_names)
