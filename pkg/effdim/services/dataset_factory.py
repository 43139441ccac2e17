"""
Dataset generation service.
Builds transient datasets (perturbed parameters and their observed
behaviors) and optimization datasets (minimizers of least-squares fits to a
reference behavior, i.e. samples of its level set).
"""

import logging
import multiprocessing
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from functools import partial
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import least_squares, line_search
from sklearn.model_selection import train_test_split as split_rows

from effdim.config import DEFAULT_FD_STEP, DEFAULT_FIT_ITERATIONS, DEFAULT_GTOL
from effdim.errors import DatasetError, DimensionMismatchError, IntegrationError, InvalidInputError
from effdim.services.model_zoo import ModelId, Observable, forward_observations, get_spec, validate_params
from effdim.services.randomness import derive_seed, make_rng

logger = logging.getLogger(__name__)

# Fraction of failed rows above which a transient dataset is rejected
MAX_FAILURE_RATE = 0.01
# Convergence rate below which an optimization dataset is rejected
MIN_CONVERGENCE_RATE = 0.5


class SamplingMode(str, Enum):
    UNIFORM_FRACTION = "UNIFORM_FRACTION"
    LOG_UNIFORM_RANGE = "LOG_UNIFORM_RANGE"


@dataclass(frozen=True)
class SamplingPlan:
    """How parameter rows are drawn around a base point.

    `fraction_or_decades` is the relative half-width for UNIFORM_FRACTION and
    the log10 half-width for LOG_UNIFORM_RANGE; the latter may be given per
    coordinate.
    """
    base_point: Tuple[float, ...]
    mode: SamplingMode
    fraction_or_decades: Union[float, Tuple[float, ...]]
    count: int
    seed: int
    stream: str = "sample"

    def __post_init__(self):
        if self.count < 1:
            raise InvalidInputError(f"count must be at least 1, got {self.count}")
        base = np.asarray(self.base_point, dtype=float)
        if np.any(base <= 0):
            raise InvalidInputError("base point must be strictly positive")
        width = np.broadcast_to(np.asarray(self.fraction_or_decades, dtype=float), base.shape)
        if self.mode is SamplingMode.UNIFORM_FRACTION and (np.any(width < 0) or np.any(width >= 1)):
            raise InvalidInputError("fraction must lie in [0, 1)")
        if self.mode is SamplingMode.LOG_UNIFORM_RANGE and np.any(width <= 0):
            raise InvalidInputError("decades must be positive")

    def to_dict(self) -> Dict[str, Any]:
        width = self.fraction_or_decades
        return {
            "base_point": list(self.base_point),
            "mode": self.mode.value,
            "fraction": list(width) if isinstance(width, tuple) else width,
            "count": self.count,
            "seed": self.seed,
            "stream": self.stream,
        }


@dataclass
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.asarray(self.outputs, dtype=float)
        if self.outputs.ndim == 1:
            self.outputs = self.outputs[:, None]
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise DimensionMismatchError(
                f"inputs have {self.inputs.shape[0]} rows but outputs have {self.outputs.shape[0]}")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.outputs))):
            raise DatasetError("dataset contains non-finite entries")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.inputs[rows], self.outputs[rows], dict(self.meta))


@dataclass(frozen=True)
class FitResult:
    argmin: np.ndarray
    objective_value: float
    converged: bool
    iterations: int
    gradient_norm: float
    method: str = "lm"


def sample_parameters(plan: SamplingPlan) -> np.ndarray:
    """
    Draw `plan.count` i.i.d. parameter rows.

    Returns:
        np.ndarray: (count, m) matrix, identical for identical plans
    """
    rng = make_rng(plan.seed, plan.stream)
    base = np.asarray(plan.base_point, dtype=float)
    width = np.broadcast_to(np.asarray(plan.fraction_or_decades, dtype=float), base.shape)
    u = rng.uniform(-1.0, 1.0, size=(plan.count, base.size))
    if plan.mode is SamplingMode.UNIFORM_FRACTION:
        return base * (1.0 + width * u)
    return base * 10.0 ** (width * u)


def train_test_split(n: int, n_test: Union[int, float], seed: int, stream: str = "split") -> Tuple[np.ndarray, np.ndarray]:
    """Seeded row split; a float `n_test` is a fraction of `n`. Returns sorted (train, test) indices."""
    count = int(round(n_test * n)) if isinstance(n_test, float) else int(n_test)
    if not 0 <= count < n:
        raise InvalidInputError(f"Test size {count} invalid for {n} rows")
    rows = np.arange(n)
    if count == 0:
        return rows, rows[:0]
    train, test = split_rows(rows, test_size=count, random_state=derive_seed(seed, stream))
    return np.sort(train), np.sort(test)


def _observe_rows(model: ModelId, initial_state, observable, integrator: Dict[str, Any],
                  rows: np.ndarray) -> Tuple[np.ndarray, List[int]]:
    return forward_observations(model, rows, initial_state, observable, **integrator)


def _chunks(n: int, workers: int) -> List[Tuple[int, int]]:
    size = max(1, int(np.ceil(n / (4 * workers))))
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def build_transient_dataset(model: ModelId, plan: SamplingPlan, ic: Optional[np.ndarray] = None,
                            observable: Optional[Observable] = None, workers: int = 1,
                            **integrator) -> Dataset:
    """
    Sample parameters and record the observed behavior of each.

    Args:
        model: Catalog entry
        plan: Sampling plan around the base point
        ic: Initial state, the catalog default when omitted
        observable: Observed components and times, the catalog default when omitted
        workers: Process count for row-parallel simulation
        **integrator: Forwarded to the integrator (rtol, atol, max_steps, method, batch_size)

    Returns:
        Dataset: Rows whose simulation succeeded, with failures logged in meta
    """
    spec = get_spec(model)
    observable = observable or spec.observable
    inputs = validate_params(model, sample_parameters(plan))
    logger.info(f"Simulating {plan.count} {spec.model_id.value} rows ({plan.mode.value}, seed {plan.seed})")

    outputs = np.empty((inputs.shape[0], 1 if spec.is_algebraic else observable.size))
    failed: List[int] = []
    if workers > 1 and inputs.shape[0] > 1:
        bounds = _chunks(inputs.shape[0], workers)
        task = partial(_observe_rows, model, ic, observable, integrator)
        with multiprocessing.Pool(processes=workers) as pool:
            results = pool.map(task, [inputs[s:e] for s, e in bounds])
        for (s, e), (block, block_failed) in zip(bounds, results):
            outputs[s:e] = block
            failed.extend(s + i for i in block_failed)
    else:
        outputs, failed = forward_observations(model, inputs, ic, observable, **integrator)

    if failed:
        logger.warning(f"Dropped {len(failed)} rows after integration failure: {failed}")
    if len(failed) > MAX_FAILURE_RATE * plan.count:
        raise DatasetError(
            f"{len(failed)} of {plan.count} integrations failed (limit {MAX_FAILURE_RATE:.0%}); "
            f"first failures: {failed[:10]}")

    keep = np.setdiff1d(np.arange(plan.count), failed)
    meta = {
        "model": spec.model_id.value,
        "base_point": list(plan.base_point),
        "mode": plan.mode.value,
        "fraction": plan.to_dict()["fraction"],
        "seed": plan.seed,
        "observable": observable.to_dict(),
        "initial_state": list(spec.initial_state if ic is None else np.asarray(ic, dtype=float)),
        "created_at": datetime.now(timezone.utc).isoformat(),
        "kind": "transient",
        "dropped_indices": [int(i) for i in failed],
    }
    return Dataset(inputs[keep], outputs[keep], meta)


class _Objective:
    """Residuals and finite-difference Jacobians in log-parameter coordinates."""

    def __init__(self, model: ModelId, reference: np.ndarray, ic, observable: Observable,
                 fd_step: float, integrator: Dict[str, Any]):
        self.model = model
        self.reference = reference
        self.ic = ic
        self.observable = observable
        self.fd_step = fd_step
        self.integrator = dict(integrator)
        self.integrator.setdefault("batch_size", 64)
        self.evaluations = 0

    def _simulate(self, q_rows: np.ndarray) -> np.ndarray:
        self.evaluations += q_rows.shape[0]
        outputs, failed = forward_observations(self.model, np.exp(q_rows), self.ic, self.observable,
                                               **self.integrator)
        if failed:
            raise IntegrationError(f"fit simulation failed at rows {failed}")
        return outputs

    def residuals(self, q: np.ndarray) -> np.ndarray:
        return self._simulate(q[None, :])[0] - self.reference

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        """Central differences with relative step `fd_step` in each parameter."""
        m = q.size
        h = self.fd_step
        shifts = np.vstack([q + h * np.eye(m)[j] for j in range(m)] + [q - h * np.eye(m)[j] for j in range(m)])
        sims = self._simulate(shifts)
        return ((sims[:m] - sims[m:]) / (2.0 * h)).T

    def objective(self, q: np.ndarray) -> float:
        r = self.residuals(q)
        return float(r @ r)

    def gradient_q(self, q: np.ndarray) -> np.ndarray:
        return 2.0 * self.jacobian(q).T @ self.residuals(q)

    def gradient_p(self, q: np.ndarray) -> np.ndarray:
        """Gradient of g with respect to the parameters themselves."""
        return self.gradient_q(q) / np.exp(q)


def _gradient_descent(obj: _Objective, q0: np.ndarray, max_iterations: int, gtol: float) -> Tuple[np.ndarray, int]:
    q = q0.copy()
    for iteration in range(1, max_iterations + 1):
        grad = obj.gradient_q(q)
        if np.max(np.abs(grad / np.exp(q))) < gtol:
            return q, iteration
        alpha, *_ = line_search(obj.objective, obj.gradient_q, q, -grad)
        if alpha is None:
            break
        q = q - alpha * grad
    return q, max_iterations


def fit_to_reference(model: ModelId, reference: np.ndarray, start: np.ndarray, ic: Optional[np.ndarray] = None,
                     observable: Optional[Observable] = None, max_iterations: int = DEFAULT_FIT_ITERATIONS,
                     gtol: float = DEFAULT_GTOL, fd_step: float = DEFAULT_FD_STEP, **integrator) -> FitResult:
    """
    Least-squares fit of a model to a reference observation vector.

    Minimizes g(p) = sum_i (y_i(p) - y_ref_i)^2 over log-parameters with
    Levenberg-Marquardt, falling back to gradient descent with a line search
    when LM fails. Convergence means the infinity norm of the
    finite-difference gradient of g is below `gtol`.

    Returns:
        FitResult: The best point found; never worse than the start
    """
    spec = get_spec(model)
    start = validate_params(model, start)
    observable = observable or spec.observable
    reference = np.asarray(reference, dtype=float)
    if reference.shape != (observable.size,):
        raise DimensionMismatchError(f"reference has shape {reference.shape}, expected ({observable.size},)")

    obj = _Objective(model, reference, ic, observable, fd_step, integrator)
    q0 = np.log(start)
    g0 = obj.objective(q0)
    grad0 = obj.gradient_p(q0)
    if np.max(np.abs(grad0)) < gtol:
        return FitResult(start, g0, True, 0, float(np.max(np.abs(grad0))))

    method = "lm"
    try:
        result = least_squares(obj.residuals, q0, jac=obj.jacobian, method="lm",
                               xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_iterations)
        q, iterations = result.x, int(result.nfev)
        if not np.all(np.isfinite(result.fun)):
            raise FloatingPointError(result.message)
    except (IntegrationError, FloatingPointError, ValueError) as e:
        logger.debug(f"LM failed from {start}: {e}; falling back to gradient descent")
        method = "gradient_descent"
        try:
            q, iterations = _gradient_descent(obj, q0, max_iterations, gtol)
        except IntegrationError:
            q, iterations = q0, max_iterations

    try:
        g = obj.objective(q)
        grad = obj.gradient_p(q)
    except IntegrationError:
        g, grad = np.inf, np.full(q.size, np.inf)
    if not g <= g0:
        q, g, grad = q0, g0, grad0
    grad_norm = float(np.max(np.abs(grad)))
    return FitResult(np.exp(q), g, grad_norm < gtol, iterations, grad_norm, method)


def _fit_one(model, reference, ic, observable, fit_kwargs, start) -> FitResult:
    try:
        return fit_to_reference(model, reference, start, ic, observable, **fit_kwargs)
    except IntegrationError as e:
        logger.debug(f"Fit from {start} abandoned: {e}")
        return FitResult(np.asarray(start), np.inf, False, 0, np.inf, "failed")


def build_optimization_dataset(model: ModelId, reference: np.ndarray, n_starts: int, start_plan: SamplingPlan,
                               ic: Optional[np.ndarray] = None, observable: Optional[Observable] = None,
                               workers: int = 1, **fit_kwargs) -> Dataset:
    """
    Multi-start least-squares fits to one reference behavior.

    Args:
        model: Catalog entry
        reference: Observation vector whose level set is sampled
        n_starts: Number of starting points drawn from `start_plan`
        start_plan: Sampling plan of the starts (its count is overridden)
        ic, observable: As for `build_transient_dataset`
        workers: Process count for parallel fits
        **fit_kwargs: Forwarded to `fit_to_reference`

    Returns:
        Dataset: Converged minimizers and their observation vectors
    """
    if n_starts < 1:
        raise InvalidInputError("n_starts must be at least 1")
    spec = get_spec(model)
    observable = observable or spec.observable
    plan = SamplingPlan(start_plan.base_point, start_plan.mode, start_plan.fraction_or_decades,
                        n_starts, start_plan.seed, start_plan.stream)
    starts = sample_parameters(plan)
    logger.info(f"Running {n_starts} least-squares fits for {spec.model_id.value}")

    task = partial(_fit_one, model, np.asarray(reference, dtype=float), ic, observable, fit_kwargs)
    if workers > 1 and n_starts > 1:
        with multiprocessing.Pool(processes=workers) as pool:
            results = pool.map(task, list(starts))
    else:
        results = [task(s) for s in starts]

    converged = [r for r in results if r.converged]
    rate = len(converged) / n_starts
    logger.info(f"Converged {len(converged)}/{n_starts} fits ({rate:.1%})")
    if rate < MIN_CONVERGENCE_RATE:
        raise DatasetError(f"Only {rate:.1%} of fits converged (minimum {MIN_CONVERGENCE_RATE:.0%})")

    minimizers = np.vstack([r.argmin for r in converged])
    outputs, failed = forward_observations(model, minimizers, ic, observable,
                                           **{k: v for k, v in fit_kwargs.items()
                                              if k in ("rtol", "atol", "max_steps", "method", "batch_size")})
    keep = np.setdiff1d(np.arange(len(converged)), failed)
    meta = {
        "model": spec.model_id.value,
        "base_point": list(plan.base_point),
        "mode": plan.mode.value,
        "fraction": plan.to_dict()["fraction"],
        "seed": plan.seed,
        "observable": observable.to_dict(),
        "reference": [float(v) for v in np.ravel(reference)],
        "created_at": datetime.now(timezone.utc).isoformat(),
        "kind": "optimization",
        "n_starts": n_starts,
        "n_converged": len(converged),
        "convergence_rate": rate,
        "objective_max": float(max(r.objective_value for r in converged)),
        "dropped_indices": [int(i) for i in failed],
    }
    return Dataset(minimizers[keep], outputs[keep], meta)


def level_set_deviation(dataset: Dataset, reference: np.ndarray) -> np.ndarray:
    """l2 distance of every row's behavior from the reference behavior."""
    return np.linalg.norm(dataset.outputs - np.asarray(reference, dtype=float)[None, :], axis=1)
