"""
Jointly smooth functions service.
Common directions between two row-aligned observation sets, removal of a
function subspace, uncommon (set-specific) directions, the spiral generator,
and rank-correlation helpers for comparing function sets.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.stats import spearmanr

from effdim.errors import DimensionMismatchError, EmbeddingError, InvalidInputError
from effdim.services.dmaps_core import KernelSpec, KernelVariant, affinity, dmaps_embed, epsilon_heuristic
from effdim.services.randomness import make_rng

logger = logging.getLogger(__name__)

DEFAULT_M = 5
_MAX_D = 100
_RANK_TOL = 1e-8


@dataclass(frozen=True)
class ObservationPair:
    set1: np.ndarray
    set2: np.ndarray

    def __post_init__(self):
        s1 = np.asarray(self.set1, dtype=float)
        s2 = np.asarray(self.set2, dtype=float)
        s1 = s1[:, None] if s1.ndim == 1 else s1
        s2 = s2[:, None] if s2.ndim == 1 else s2
        if s1.shape[0] != s2.shape[0]:
            raise DimensionMismatchError(f"sets have {s1.shape[0]} and {s2.shape[0]} rows")
        object.__setattr__(self, "set1", s1)
        object.__setattr__(self, "set2", s2)

    @property
    def n(self) -> int:
        return self.set1.shape[0]

    def swapped(self) -> "ObservationPair":
        return ObservationPair(self.set2, self.set1)

    def get(self, which: int) -> np.ndarray:
        if which not in (1, 2):
            raise InvalidInputError(f"observation set must be 1 or 2, got {which}")
        return self.set1 if which == 1 else self.set2


@dataclass(frozen=True)
class JSFBasis:
    functions: np.ndarray
    singular_values: np.ndarray
    d: int
    epsilons: Tuple[float, float]
    set_bases: Tuple[np.ndarray, np.ndarray]

    @property
    def M(self) -> int:
        return self.functions.shape[1]

    def sidecar(self) -> dict:
        return {
            "d": self.d,
            "M": self.M,
            "epsilons": list(self.epsilons),
            "singular_values": [float(s) for s in self.singular_values],
        }


@dataclass(frozen=True)
class SpiralSample:
    pair: ObservationPair
    z: np.ndarray
    c: np.ndarray


def default_d(n: int) -> int:
    return max(1, min(_MAX_D, n // 10))


def _fix_signs(columns: np.ndarray) -> np.ndarray:
    pivots = np.argmax(np.abs(columns), axis=0)
    signs = np.sign(columns[pivots, np.arange(columns.shape[1])])
    signs[signs == 0] = 1.0
    return columns * signs[None, :]


def kernel_eigenbasis(points: np.ndarray, d: int, epsilon: Optional[float] = None,
                      center: bool = True) -> Tuple[np.ndarray, float]:
    """
    Leading eigenvectors of the Gaussian kernel exp(-|x_i - x_j|^2 / 2 eps).

    With `center` the constant function is projected out and the span is
    re-orthonormalized, so no basis function is a trivial offset.

    Returns:
        Tuple: (N, <= d) orthonormal basis and the epsilon used
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if not 1 <= d < n:
        raise InvalidInputError(f"d must satisfy 1 <= d < N, got d={d}, N={n}")
    if np.all(np.ptp(points, axis=0) == 0):
        raise EmbeddingError("degenerate kernel: all observations are equal")
    epsilon = epsilon or epsilon_heuristic(points)
    a = affinity(points, None, KernelSpec(KernelVariant.PLAIN_INPUT, epsilon))
    _, vectors = scipy.linalg.eigh(a, subset_by_index=[n - d, n - 1])
    basis = vectors[:, ::-1]
    if center:
        ones = np.full((n, 1), 1.0 / np.sqrt(n))
        u, s, _ = np.linalg.svd(remove_subspace(basis, ones), full_matrices=False)
        basis = u[:, s > _RANK_TOL]
    return basis, float(epsilon)


def compute_jsf(pair: ObservationPair, d: Optional[int] = None, M: int = DEFAULT_M,
                epsilons: Optional[Tuple[Optional[float], Optional[float]]] = None) -> JSFBasis:
    """
    Jointly smooth functions of two observation sets.

    Each set gets a Gaussian kernel and its top-d eigenvectors W_k; the
    left singular vectors of [W_1, W_2] are the jointly smooth functions.
    Singular values near sqrt(2) mark functions smooth on both sets.

    Args:
        pair: Row-aligned observation sets
        d: Eigenvectors per set; min(100, N/10) by default
        M: Number of functions returned
        epsilons: Per-set kernel scales; median heuristic for None entries

    Returns:
        JSFBasis: M orthonormal functions and the full singular spectrum
    """
    d = d or default_d(pair.n)
    epsilons = epsilons or (None, None)
    w1, eps1 = kernel_eigenbasis(pair.set1, d, epsilons[0])
    w2, eps2 = kernel_eigenbasis(pair.set2, d, epsilons[1])
    u, s, _ = np.linalg.svd(np.hstack([w1, w2]), full_matrices=False)
    if not 1 <= M <= u.shape[1]:
        raise InvalidInputError(f"M must lie in [1, {u.shape[1]}], got {M}")
    logger.info(f"JSF on {pair.n} rows: d={d}, eps=({eps1:.4g}, {eps2:.4g}), "
                f"leading singular values {np.array2string(s[:M], precision=4)}")
    return JSFBasis(_fix_signs(u[:, :M]), s, d, (eps1, eps2), (w1, w2))


def remove_subspace(full: np.ndarray, remove: np.ndarray) -> np.ndarray:
    """
    Remove the contribution of the `remove` functions from every `full` function.

    c = full^T remove; r_i = remove c_i^T; out_i = full_i - r_i.
    The removal is an orthogonal projection when `remove` has orthonormal columns.
    """
    full = np.asarray(full, dtype=float)
    remove = np.asarray(remove, dtype=float)
    if remove.size == 0:
        return full.copy()
    if full.shape[0] != remove.shape[0]:
        raise DimensionMismatchError(f"full has {full.shape[0]} rows, remove has {remove.shape[0]}")
    c = full.T @ remove
    return full - remove @ c.T


def common_subspace(jsf: JSFBasis, R: int) -> np.ndarray:
    """R smooth functions on the common manifold: DMaps on the JSFs, orthonormalized."""
    n = jsf.functions.shape[0]
    if not 1 <= R < n - 1:
        raise InvalidInputError(f"R must satisfy 1 <= R < N - 1, got R={R}, N={n}")
    spec = KernelSpec(KernelVariant.PLAIN_INPUT, epsilon_heuristic(jsf.functions))
    embedding = dmaps_embed(affinity(jsf.functions, None, spec), alpha=1, k=R)
    q, _ = np.linalg.qr(embedding.eigenvectors)
    return q


def uncommon_directions(pair: ObservationPair, jsf: JSFBasis, R: Optional[int] = None, M: Optional[int] = None,
                        target_set: int = 2, d: Optional[int] = None) -> JSFBasis:
    """
    Functions specific to one observation set.

    The JSFs are expanded by DMaps into R common-manifold functions, which
    are removed from the target set's kernel eigenbasis; the rows of that
    residual basis are then treated as a data set and paired with the
    target set's raw coordinates in a second JSF run.

    Args:
        pair: The pair `jsf` was computed on
        jsf: Common functions
        R: Common-manifold functions to remove, 5 * M by default
        M: Number of uncommon functions, the JSF count by default
        target_set: Set whose specific directions are sought (1 or 2)

    Returns:
        JSFBasis: M uncommon functions with their joint-smoothness spectrum
    """
    M = M or jsf.M
    R = R or 5 * M
    target = pair.get(target_set)
    basis = jsf.set_bases[target_set - 1]
    phi = common_subspace(jsf, R)
    residual = remove_subspace(basis, phi)
    logger.info(f"Removed {R} common functions from set {target_set}'s {basis.shape[1]}-function basis; "
                f"residual norm {np.linalg.norm(residual):.3g}")
    return compute_jsf(ObservationPair(residual, target), d or jsf.d, M)


def generate_spiral(n: int, seed: int = 0) -> SpiralSample:
    """
    Spiral toy data: (a, b, c) ~ U[-0.5, 0.5]^3, z = a + b^2,
    y = (c/2 + z/4 + 1/3)(cos 2 pi c, sin 2 pi c); set1 = (a, b), set2 = y.
    """
    if n < 1:
        raise InvalidInputError("spiral needs at least one sample")
    abc = make_rng(seed, "spiral").uniform(-0.5, 0.5, size=(n, 3))
    a, b, c = abc.T
    z, y = spiral_map(a, b, c)
    return SpiralSample(ObservationPair(np.column_stack([a, b]), y), z, c)


def spiral_map(a, b, c) -> Tuple[np.ndarray, np.ndarray]:
    a, b, c = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (a, b, c))
    z = a + b ** 2
    radius = c / 2.0 + z / 4.0 + 1.0 / 3.0
    return z, np.column_stack([radius * np.cos(2 * np.pi * c), radius * np.sin(2 * np.pi * c)])


def spearman_abs(x: np.ndarray, y: np.ndarray) -> float:
    """|Spearman rho|; sign-free because functions are defined up to sign."""
    rho = spearmanr(np.ravel(x), np.ravel(y))[0]
    return float(abs(rho)) if np.isfinite(rho) else 0.0


def best_match(functions: np.ndarray, target: np.ndarray) -> Tuple[int, float]:
    """Column of `functions` most rank-correlated with `target`."""
    functions = np.atleast_2d(functions.T).T
    scores = [spearman_abs(functions[:, j], target) for j in range(functions.shape[1])]
    j = int(np.argmax(scores))
    return j, scores[j]


def match_functions(reference: np.ndarray, candidates: np.ndarray) -> List[Tuple[int, int, float]]:
    """
    Greedy one-to-one pairing of reference columns with candidate columns by |Spearman rho|.

    Returns:
        List: (reference index, candidate index, |rho|), strongest pair first
    """
    reference = np.atleast_2d(reference.T).T
    candidates = np.atleast_2d(candidates.T).T
    scores = np.array([[spearman_abs(reference[:, i], candidates[:, j]) for j in range(candidates.shape[1])]
                       for i in range(reference.shape[1])])
    pairs = []
    while len(pairs) < min(scores.shape):
        i, j = np.unravel_index(np.argmax(scores), scores.shape)
        pairs.append((int(i), int(j), float(scores[i, j])))
        scores[i, :] = -1.0
        scores[:, j] = -1.0
    return pairs
