"""
Identifiability audit service.
Checks discovered coordinate maps for local and global invertibility, and
computes the sensitivity nullspace (the tangent space of a level set) of a
catalog model at a parameter point.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist, squareform

from effdim.errors import DimensionMismatchError, IntegrationError, InvalidInputError
from effdim.services.model_zoo import ModelId, Observable, forward_observations, get_spec, validate_params

logger = logging.getLogger(__name__)

DEFAULT_SENSITIVITY_STEP = 1e-5
DEFAULT_RANK_THRESHOLD = 1e-6
# Above this many rows the injectivity scan hashes outputs instead of comparing all pairs
EXACT_SCAN_LIMIT = 2000


class DifferentiableMap(Protocol):
    """Anything with row-wise values and Jacobians (GH models, Double DMaps, MLPs)."""

    def predict(self, points: np.ndarray) -> np.ndarray:
        ...

    def jacobian(self, points: np.ndarray) -> np.ndarray:
        ...


@dataclass
class InvertibilityReport:
    determinants: np.ndarray
    sign_consistent: bool
    min_abs_det: float
    scale_normalized: bool = False
    injectivity_violations: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def invertible(self) -> bool:
        return self.sign_consistent and self.min_abs_det > 0 and not self.injectivity_violations

    def summary(self) -> dict:
        return {
            "n_points": int(self.determinants.size),
            "sign_consistent": self.sign_consistent,
            "min_abs_det": self.min_abs_det,
            "max_abs_det": float(np.max(np.abs(self.determinants))) if self.determinants.size else 0.0,
            "scale_normalized": self.scale_normalized,
            "n_injectivity_violations": len(self.injectivity_violations),
            "invertible": self.invertible,
        }


@dataclass(frozen=True)
class NullspaceBasis:
    basis_vectors: np.ndarray
    singular_values: np.ndarray
    rank_threshold: float
    fim_eigenvalues: np.ndarray
    sensitivity: np.ndarray

    @property
    def dimension(self) -> int:
        return self.basis_vectors.shape[1]

    @property
    def rank(self) -> int:
        return self.sensitivity.shape[1] - self.dimension


def jacobian_determinants(map_model: DifferentiableMap, points: np.ndarray,
                          scale_normalize: bool = False) -> InvertibilityReport:
    """
    Determinant of the map's Jacobian at every point.

    Args:
        map_model: Map with square Jacobians
        points: (N, d) evaluation points
        scale_normalize: Multiply each partial df_i/dx_j by std(x_j)/std(f_i)
            over the points before taking the determinant

    Returns:
        InvertibilityReport: Determinants and their sign consistency
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    jac = np.asarray(map_model.jacobian(points), dtype=float)
    if jac.ndim != 3 or jac.shape[1] != jac.shape[2]:
        raise DimensionMismatchError(f"Jacobian must be square per point, got shape {jac.shape[1:]}")
    if scale_normalize:
        values = np.asarray(map_model.predict(points), dtype=float)
        in_std = points.std(axis=0)
        out_std = values.std(axis=0)
        out_std = np.where(out_std > 0, out_std, 1.0)
        jac = jac * in_std[None, None, :] / out_std[None, :, None]

    dets = np.linalg.det(jac)
    sign_consistent = bool(np.all(dets > 0) or np.all(dets < 0))
    min_abs = float(np.min(np.abs(dets))) if dets.size else 0.0
    if not sign_consistent:
        logger.warning(f"Jacobian determinant changes sign across {dets.size} points; map is not invertible there")
    return InvertibilityReport(dets, sign_consistent, min_abs, scale_normalize)


def _pair_violations(inputs: np.ndarray, pairs: np.ndarray, in_tol: float) -> List[Tuple[int, int]]:
    if pairs.size == 0:
        return []
    gaps = np.linalg.norm(inputs[pairs[:, 0]] - inputs[pairs[:, 1]], axis=1)
    hits = pairs[gaps > in_tol]
    return sorted((int(i), int(j)) for i, j in hits)


def injectivity_scan(inputs: np.ndarray, outputs: np.ndarray, out_tol: float, in_tol: float,
                     exact: Optional[bool] = None) -> List[Tuple[int, int]]:
    """
    Find pairs with close outputs but distant inputs.

    Args:
        inputs, outputs: Row-aligned (N, d_in) and (N, d_out) arrays
        out_tol: Outputs closer than this count as equal
        in_tol: Inputs farther apart than this count as distinct
        exact: Force the all-pairs scan (True) or the tree scan (False);
            by default exact up to EXACT_SCAN_LIMIT rows

    Returns:
        List: Sorted (i, j) pairs with i < j; empty means no evidence against injectivity
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    if inputs.shape[0] != outputs.shape[0]:
        raise DimensionMismatchError(f"{inputs.shape[0]} inputs but {outputs.shape[0]} outputs")
    n = inputs.shape[0]
    if n < 2:
        return []
    exact = n <= EXACT_SCAN_LIMIT if exact is None else exact

    if exact:
        close = squareform(pdist(outputs)) < out_tol
        i, j = np.nonzero(np.triu(close, k=1))
        pairs = np.column_stack([i, j])
    else:
        pairs = cKDTree(outputs).query_pairs(r=out_tol, output_type="ndarray")
        # query_pairs uses <= r
        if pairs.size:
            gaps = np.linalg.norm(outputs[pairs[:, 0]] - outputs[pairs[:, 1]], axis=1)
            pairs = pairs[gaps < out_tol]
    violations = _pair_violations(inputs, pairs.reshape(-1, 2), in_tol)
    logger.info(f"Injectivity scan over {n} points ({'exact' if exact else 'tree'}): {len(violations)} violations")
    return violations


def sensitivity_matrix(model: ModelId, point: np.ndarray, observable: Optional[Observable] = None,
                       initial_state: Optional[np.ndarray] = None, fd_step: float = DEFAULT_SENSITIVITY_STEP,
                       **integrator) -> np.ndarray:
    """
    Central-difference sensitivities d y_i / d log p_j.

    Returns:
        np.ndarray: (n_obs, m) sensitivity matrix
    """
    p = validate_params(model, point)
    m = p.size
    q = np.log(p)
    shifted = np.vstack([q + fd_step * np.eye(m)[j] for j in range(m)] + [q - fd_step * np.eye(m)[j] for j in range(m)])
    outputs, failed = forward_observations(model, np.exp(shifted), initial_state, observable, **integrator)
    if failed:
        raise IntegrationError(f"sensitivity simulations failed for perturbations {failed}")
    return ((outputs[:m] - outputs[m:]) / (2.0 * fd_step)).T


def sensitivity_nullspace(model: ModelId, point: np.ndarray, observable: Optional[Observable] = None,
                          initial_state: Optional[np.ndarray] = None, fd_step: float = DEFAULT_SENSITIVITY_STEP,
                          rank_threshold: float = DEFAULT_RANK_THRESHOLD, **integrator) -> NullspaceBasis:
    """
    Nullspace of the sensitivity matrix at a parameter point.

    Directions are in log-parameter coordinates. The nullspace collects right
    singular vectors with sigma_i < rank_threshold * sigma_1; the full
    spectrum and the sensitivity FIM eigenvalues are kept for gap inspection.

    Args:
        model: Catalog entry
        point: Parameter vector
        observable: Observed components, the catalog default when omitted
        fd_step: Relative central-difference step
        rank_threshold: Relative singular-value cutoff

    Returns:
        NullspaceBasis: Orthonormal nullspace basis and the spectrum
    """
    if not 0 < rank_threshold < 1:
        raise InvalidInputError(f"rank_threshold must lie in (0, 1), got {rank_threshold}")
    spec = get_spec(model)
    sens = sensitivity_matrix(model, point, observable, initial_state, fd_step, **integrator)
    _, s, vt = np.linalg.svd(sens, full_matrices=True)
    m = sens.shape[1]
    padded = np.zeros(m)
    padded[:s.size] = s
    null = padded < rank_threshold * padded[0]
    basis = vt[null].T
    fim = np.sort(np.linalg.eigvalsh(sens.T @ sens))[::-1]
    logger.info(f"{spec.model_id.value} sensitivity spectrum {np.array2string(padded, precision=3)}; "
                f"nullspace dimension {basis.shape[1]} at threshold {rank_threshold:g}")
    return NullspaceBasis(basis, padded, rank_threshold, fim, sens)


def nullspace_residuals(basis: NullspaceBasis) -> np.ndarray:
    """||J v|| for every nullspace vector."""
    if basis.dimension == 0:
        return np.zeros(0)
    return np.linalg.norm(basis.sensitivity @ basis.basis_vectors, axis=0)


def spectral_gap(singular_values: np.ndarray) -> Tuple[int, float]:
    """Index and size (ratio) of the largest consecutive drop in a positive spectrum."""
    s = np.asarray(singular_values, dtype=float)
    s = np.maximum(s, np.finfo(float).tiny)
    ratios = s[:-1] / s[1:]
    if ratios.size == 0:
        return 0, 1.0
    k = int(np.argmax(ratios))
    return k + 1, float(ratios[k])


def determinant_histogram(determinants: np.ndarray, bins: int = 50) -> Tuple[np.ndarray, np.ndarray]:
    """Histogram counts and edges of determinants, for the report."""
    counts, edges = np.histogram(np.asarray(determinants, dtype=float), bins=bins)
    return counts, edges
