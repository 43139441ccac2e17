"""
Built-in parametric forward models.
Turns parameter vectors into trajectories and observation vectors, and
provides the closed-form effective parameters used to validate what the
data-driven stages discover.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from effdim.config import DEFAULT_ATOL, DEFAULT_MAX_STEPS, DEFAULT_RTOL
from effdim.errors import (
    DimensionMismatchError,
    IntegrationError,
    InvalidInputError,
    UnsupportedModelError,
)

logger = logging.getLogger(__name__)

# Total enzyme used by every closed-form reduction
ENZYME_TOTAL = 0.66
# Below this Thiele modulus the series branch of eta is used
SMALL_PHI = 1e-3
# RHS evaluations per accepted explicit Runge-Kutta 5(4) step
_EVALS_PER_STEP = 6


class ModelId(str, Enum):
    MSP_FULL = "MSP_FULL"
    MSP_REDUCED = "MSP_REDUCED"
    TOY_ENZYME = "TOY_ENZYME"
    COMPARTMENTAL_2 = "COMPARTMENTAL_2"
    EFFECTIVENESS_FACTOR = "EFFECTIVENESS_FACTOR"


@dataclass(frozen=True)
class Observable:
    """Which state components are read out, and at which times.

    With several indices the vector is time-major: every index at the first
    time, then every index at the second time, and so on.
    """
    indices: Tuple[int, ...]
    times: Tuple[float, ...]

    @property
    def size(self) -> int:
        return len(self.indices) * len(self.times)

    def to_dict(self) -> Dict[str, list]:
        return {"indices": list(self.indices), "times": list(self.times)}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "Observable":
        return cls(tuple(int(i) for i in data["indices"]), tuple(float(t) for t in data["times"]))


@dataclass(frozen=True)
class Trajectory:
    time_grid: np.ndarray
    states: np.ndarray
    state_names: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ModelSpec:
    """Static description of one catalog entry."""
    model_id: ModelId
    state_names: Tuple[str, ...]
    param_names: Tuple[str, ...]
    param_units: Tuple[str, ...]
    base_point: Tuple[float, ...]
    initial_state: Tuple[float, ...]
    observable: Observable
    effective_names: Tuple[str, ...]
    description: str
    rhs: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def is_algebraic(self) -> bool:
        return self.rhs is None


def _msp_full_rhs(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    s0, es0, es1, s1, s2, e = x
    kf1, kr1, kcat1, kf2, kr2, kcat2 = p
    bind0 = kf1 * e * s0
    bind1 = kf2 * e * s1
    return np.stack([
        -bind0 + kr1 * es0,
        bind0 - (kr1 + kcat1) * es0,
        kcat1 * es0 - (kr2 + kcat2) * es1 + bind1,
        -bind1 + kr2 * es1,
        kcat2 * es1,
        -bind0 + kr1 * es0 - bind1 + kr2 * es1 + kcat2 * es1,
    ])


def _msp_reduced_rhs(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    s0, s1, s2 = x
    kappa1, kappa2, pi = p
    return np.stack([
        -kappa1 * s0,
        kappa1 * (1.0 - pi) * s0 - kappa2 * s1,
        kappa1 * pi * s0 + kappa2 * s1,
    ])


def _toy_enzyme_rhs(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    s0, es0, s1, e = x
    kf, kr, kcat = p
    bind = kf * e * s0
    return np.stack([
        -bind + kr * es0,
        bind - kr * es0 - kcat * es0,
        kcat * es0,
        -bind + kr * es0 + kcat * es0,
    ])


def _compartmental_rhs(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    x1, x2 = x
    p10, p12, p20, p21 = p
    return np.stack([
        -(p10 + p12) * x1 + p21 * x2,
        p12 * x1 - (p20 + p21) * x2,
    ])


def _even_times(start: float, stop: float, step: float) -> Tuple[float, ...]:
    count = int(round((stop - start) / step)) + 1
    return tuple(float(start + i * step) for i in range(count))


MSP_BASE_POINT = (0.71, 19.0, 6700.0, 0.97, 9200.0, 5200.0)
MSP_NOMINAL_KAPPA = (0.467, 0.232, 0.362)
TOY_K1 = (0.71, 19.0, 6700.0)
TOY_K2 = (0.97, 7000.0, 10000.0)

MODEL_CATALOG: Dict[ModelId, ModelSpec] = {
    ModelId.MSP_FULL: ModelSpec(
        model_id=ModelId.MSP_FULL,
        state_names=("S0", "ES0", "ES1", "S1", "S2", "E"),
        param_names=("kf1", "kr1", "kcat1", "kf2", "kr2", "kcat2"),
        param_units=("L/(umol min)", "1/min", "1/min", "L/(umol min)", "1/min", "1/min"),
        base_point=MSP_BASE_POINT,
        initial_state=(5.0, 0.0, 0.0, 0.0, 0.0, ENZYME_TOTAL),
        observable=Observable((4,), _even_times(2.0, 20.0, 2.0)),
        effective_names=("kappa1", "kappa2", "pi"),
        description="Dual multisite phosphorylation, full mass-action mechanism",
        rhs=_msp_full_rhs,
    ),
    ModelId.MSP_REDUCED: ModelSpec(
        model_id=ModelId.MSP_REDUCED,
        state_names=("S0", "S1", "S2"),
        param_names=("kappa1", "kappa2", "pi"),
        param_units=("1/min", "1/min", "-"),
        base_point=MSP_NOMINAL_KAPPA,
        initial_state=(5.0, 0.0, 0.0),
        observable=Observable((2,), _even_times(2.0, 20.0, 2.0)),
        effective_names=(),
        description="Quasi-steady-state reduction of the phosphorylation mechanism",
        rhs=_msp_reduced_rhs,
    ),
    ModelId.TOY_ENZYME: ModelSpec(
        model_id=ModelId.TOY_ENZYME,
        state_names=("S0", "ES0", "S1", "E"),
        param_names=("kf", "kr", "kcat"),
        param_units=("L/(umol s)", "1/s", "1/s"),
        base_point=TOY_K2,
        initial_state=(5.0, 0.0, 0.0, ENZYME_TOTAL),
        observable=Observable((2,), _even_times(2.0, 10.0, 2.0)),
        effective_names=("k_eff",),
        description="Single-step enzyme conversion S0 -> S1",
        rhs=_toy_enzyme_rhs,
    ),
    ModelId.COMPARTMENTAL_2: ModelSpec(
        model_id=ModelId.COMPARTMENTAL_2,
        state_names=("x1", "x2"),
        param_names=("p10", "p12", "p20", "p21"),
        param_units=("1/T", "1/T", "1/T", "1/T"),
        base_point=(1.0, 1.0, 1.0, 1.0),
        initial_state=(1.0, 0.0),
        observable=Observable((0,), _even_times(0.5, 5.0, 0.5)),
        effective_names=("beta1", "beta2", "beta3"),
        description="Linear two-compartment model with impulse input",
        rhs=_compartmental_rhs,
    ),
    ModelId.EFFECTIVENESS_FACTOR: ModelSpec(
        model_id=ModelId.EFFECTIVENESS_FACTOR,
        state_names=(),
        param_names=("Phi", "B"),
        param_units=("-", "-"),
        base_point=(100.0, 100.0),
        initial_state=(),
        observable=Observable((0,), ()),
        effective_names=("eta",),
        description="Catalyst pellet effectiveness factor (algebraic)",
        rhs=None,
    ),
}


def get_spec(model: ModelId) -> ModelSpec:
    return MODEL_CATALOG[ModelId(model)]


def validate_params(model: ModelId, params: np.ndarray) -> np.ndarray:
    """Check length and strict positivity of one parameter vector or a row matrix."""
    spec = get_spec(model)
    params = np.asarray(params, dtype=float)
    if params.shape[-1] != spec.n_params:
        raise DimensionMismatchError(
            f"{spec.model_id.value} expects {spec.n_params} parameters, got {params.shape[-1]}")
    if not np.all(np.isfinite(params)) or np.any(params <= 0):
        raise InvalidInputError(f"{spec.model_id.value} parameters must be finite and strictly positive")
    return params


def evaluate_rhs(model: ModelId, state: np.ndarray, params: np.ndarray) -> np.ndarray:
    """
    Time derivative of the state for one parameter vector.

    Args:
        model: Catalog entry
        state: State vector in catalog order
        params: Parameter vector in catalog order

    Returns:
        np.ndarray: d(state)/dt
    """
    spec = get_spec(model)
    if spec.is_algebraic:
        raise UnsupportedModelError(f"{spec.model_id.value} is algebraic and has no right-hand side")
    state = np.asarray(state, dtype=float)
    if state.shape != (spec.n_states,):
        raise DimensionMismatchError(
            f"{spec.model_id.value} expects a state of length {spec.n_states}, got shape {state.shape}")
    params = validate_params(model, params)
    return spec.rhs(state, params)


class _StepCapExceeded(Exception):
    pass


def _integrate_block(spec: ModelSpec, params: np.ndarray, y0: np.ndarray, time_grid: np.ndarray,
                     rtol: float, atol: float, max_steps: int, method: str) -> np.ndarray:
    """Integrate B parameter rows as one stacked system; returns (B, T, n_states)."""
    n, b = y0.shape
    if len(time_grid) == 1:
        return y0.T[:, None, :].copy()

    progress = {"t": float(time_grid[0]), "calls": 0}
    max_calls = _EVALS_PER_STEP * max_steps + 2

    def fun(t, y):
        progress["calls"] += 1
        if progress["calls"] > max_calls:
            raise _StepCapExceeded()
        x = y.reshape(n, b)
        if np.all(np.isfinite(x)):
            progress["t"] = max(progress["t"], float(t))
        return spec.rhs(x, params).ravel()

    try:
        sol = solve_ivp(fun, (float(time_grid[0]), float(time_grid[-1])), y0.ravel(), method=method,
                        t_eval=time_grid, rtol=rtol, atol=atol)
    except _StepCapExceeded:
        raise IntegrationError(f"Step cap of {max_steps} steps exceeded (stiffness)", progress["t"])

    if not sol.success or sol.y.shape[1] != len(time_grid):
        raise IntegrationError(f"Integrator failure: {sol.message}", progress["t"])
    states = sol.y.reshape(n, b, len(time_grid)).transpose(1, 2, 0)
    if not np.all(np.isfinite(states)):
        raise IntegrationError("Non-finite state encountered", progress["t"])
    return states


def _check_grid(time_grid: Sequence[float]) -> np.ndarray:
    grid = np.asarray(time_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or grid[0] != 0.0:
        raise InvalidInputError("time grid must be a non-empty vector starting at 0")
    if np.any(np.diff(grid) <= 0):
        raise InvalidInputError("time grid must be strictly increasing")
    return grid


def integrate(model: ModelId, params: np.ndarray, initial_state: np.ndarray, time_grid: Sequence[float],
              rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
              max_steps: int = DEFAULT_MAX_STEPS, method: str = "RK45") -> Trajectory:
    """
    Integrate one model instance and sample it exactly on the time grid.

    Args:
        model: Catalog entry with an ODE right-hand side
        params: Strictly positive parameter vector
        initial_state: State at t=0
        time_grid: Strictly increasing times starting at 0
        rtol, atol: Integrator tolerances
        max_steps: Step cap before the run is declared too stiff
        method: scipy integrator name, explicit RK45 by default

    Returns:
        Trajectory: States at every grid time
    """
    spec = get_spec(model)
    if spec.is_algebraic:
        raise UnsupportedModelError(f"{spec.model_id.value} is algebraic and cannot be integrated")
    params = validate_params(model, params)
    if params.ndim != 1:
        raise DimensionMismatchError("integrate takes a single parameter vector; use integrate_batch")
    y0 = np.asarray(initial_state, dtype=float)
    if y0.shape != (spec.n_states,):
        raise DimensionMismatchError(
            f"{spec.model_id.value} expects an initial state of length {spec.n_states}, got {y0.shape}")
    grid = _check_grid(time_grid)
    states = _integrate_block(spec, params[:, None], y0[:, None], grid, rtol, atol, max_steps, method)
    return Trajectory(time_grid=grid, states=states[0], state_names=spec.state_names)


def integrate_batch(model: ModelId, params: np.ndarray, initial_state: np.ndarray, time_grid: Sequence[float],
                    rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                    max_steps: int = DEFAULT_MAX_STEPS, method: str = "RK45",
                    batch_size: int = 256) -> Tuple[np.ndarray, List[int]]:
    """
    Integrate many parameter rows, a block of rows per solver call.

    A block that fails is retried row by row so only the offending rows are
    reported.

    Returns:
        Tuple: states of shape (N, T, n_states) with NaN rows for failures,
        and the sorted list of failed row indices
    """
    spec = get_spec(model)
    if spec.is_algebraic:
        raise UnsupportedModelError(f"{spec.model_id.value} is algebraic and cannot be integrated")
    params = validate_params(model, np.atleast_2d(params))
    y0 = np.asarray(initial_state, dtype=float)
    if y0.shape != (spec.n_states,):
        raise DimensionMismatchError(
            f"{spec.model_id.value} expects an initial state of length {spec.n_states}, got {y0.shape}")
    grid = _check_grid(time_grid)

    n_rows = params.shape[0]
    out = np.full((n_rows, len(grid), spec.n_states), np.nan)
    failed: List[int] = []
    for start in range(0, n_rows, batch_size):
        stop = min(start + batch_size, n_rows)
        block = params[start:stop].T
        y_block = np.repeat(y0[:, None], stop - start, axis=1)
        try:
            out[start:stop] = _integrate_block(spec, block, y_block, grid, rtol, atol, max_steps, method)
            continue
        except IntegrationError as e:
            logger.warning(f"Block {start}-{stop} failed ({e}); retrying rows individually")
        for row in range(start, stop):
            try:
                out[row] = _integrate_block(spec, params[row][:, None], y0[:, None], grid,
                                            rtol, atol, max_steps, method)[0]
            except IntegrationError as e:
                logger.debug(f"Row {row} failed: {e}")
                failed.append(row)
    return out, failed


def observe(traj: Trajectory, observable: Observable) -> np.ndarray:
    """
    Read the observable's components at its sample times, in order.

    Args:
        traj: Integrated trajectory
        observable: Component indices and sample times

    Returns:
        np.ndarray: Time-major observation vector
    """
    if len(observable.times) == 0:
        return np.empty(0)
    n_states = traj.states.shape[1]
    if any(i < 0 or i >= n_states for i in observable.indices):
        raise DimensionMismatchError(f"Observable indices {observable.indices} out of range for {n_states} states")
    rows = _time_rows(traj.time_grid, observable.times)
    return traj.states[np.ix_(rows, list(observable.indices))].ravel()


def _time_rows(grid: np.ndarray, times: Sequence[float]) -> List[int]:
    rows = []
    for t in times:
        hits = np.flatnonzero(np.isclose(grid, t, rtol=0.0, atol=1e-12 * max(1.0, abs(t))))
        if hits.size == 0:
            raise InvalidInputError(f"Sample time {t} is not on the trajectory grid")
        rows.append(int(hits[0]))
    return rows


def observation_grid(observable: Observable) -> np.ndarray:
    """Integration grid for an observable: t=0 followed by its sample times."""
    times = sorted(set(float(t) for t in observable.times))
    return np.asarray([0.0] + [t for t in times if t > 0.0])


def forward_observations(model: ModelId, params: np.ndarray, initial_state: Optional[np.ndarray] = None,
                         observable: Optional[Observable] = None, **integrator) -> Tuple[np.ndarray, List[int]]:
    """
    Map parameter rows to observation vectors.

    Algebraic models return their closed-form output; ODE models are
    integrated in blocks and read out with `observe`.

    Returns:
        Tuple: (N, n_obs) outputs with NaN rows for failures, failed indices
    """
    spec = get_spec(model)
    params = validate_params(model, np.atleast_2d(params))
    if spec.model_id is ModelId.EFFECTIVENESS_FACTOR:
        return effectiveness_factor(params[:, 0], params[:, 1])[:, None], []

    observable = observable or spec.observable
    ic = spec.initial_state if initial_state is None else initial_state
    grid = observation_grid(observable)
    states, failed = integrate_batch(model, params, ic, grid, **integrator)
    outputs = np.full((params.shape[0], observable.size), np.nan)
    failed_set = set(failed)
    for i in range(params.shape[0]):
        if i in failed_set:
            continue
        outputs[i] = observe(Trajectory(grid, states[i], spec.state_names), observable)
    return outputs, failed


def analytic_effective_params(model: ModelId, params: np.ndarray, enzyme_total: float = ENZYME_TOTAL) -> np.ndarray:
    """
    Closed-form effective parameters of one parameter vector.

    The enzyme concentration entering the rate constants is the total
    enzyme, not the free enzyme.

    Returns:
        np.ndarray: (kappa1, kappa2, pi) | (k_eff,) | (beta1, beta2, beta3) | (eta,)
    """
    spec = get_spec(model)
    p = validate_params(model, params)
    if spec.model_id is ModelId.MSP_FULL:
        kf1, kr1, kcat1, kf2, kr2, kcat2 = p
        return np.array([
            enzyme_total * kf1 * kcat1 / (kr1 + kcat1),
            enzyme_total * kf2 * kcat2 / (kr2 + kcat2),
            kcat2 / (kr2 + kcat2),
        ])
    if spec.model_id is ModelId.TOY_ENZYME:
        kf, kr, kcat = p
        return np.array([enzyme_total * kf * kcat / (kr + kcat)])
    if spec.model_id is ModelId.COMPARTMENTAL_2:
        p10, p12, p20, p21 = p
        return np.array([p10 + p12, p20 + p21, p12 * p21])
    if spec.model_id is ModelId.EFFECTIVENESS_FACTOR:
        return np.atleast_1d(effectiveness_factor(p[0], p[1]))
    raise UnsupportedModelError(f"{spec.model_id.value} has no analytic reduction")


def effective_params_matrix(model: ModelId, params: np.ndarray, enzyme_total: float = ENZYME_TOTAL) -> np.ndarray:
    """Row-wise `analytic_effective_params`."""
    params = np.atleast_2d(params)
    return np.vstack([analytic_effective_params(model, row, enzyme_total) for row in params])


def effectiveness_factor(phi, biot):
    """
    Effectiveness factor of a first-order reaction in a spherical pellet
    with external mass-transfer resistance.

    Args:
        phi: Thiele modulus, scalar or array
        biot: Biot number, scalar or array

    Returns:
        Effectiveness factor, same shape as the broadcast inputs
    """
    phi_arr = np.asarray(phi, dtype=float)
    biot_arr = np.asarray(biot, dtype=float)
    if np.any(~np.isfinite(phi_arr)) or np.any(phi_arr <= 0) or np.any(~np.isfinite(biot_arr)) or np.any(biot_arr <= 0):
        raise InvalidInputError("Thiele modulus and Biot number must be finite and strictly positive")
    phi_arr, biot_arr = np.broadcast_arrays(phi_arr, biot_arr)

    # ratio = (coth(3 phi) - 1/(3 phi)) / phi
    ratio = np.empty_like(phi_arr)
    small = phi_arr < SMALL_PHI
    x = 3.0 * phi_arr[small]
    ratio[small] = 1.0 - x ** 2 / 15.0 + 2.0 * x ** 4 / 315.0 - x ** 6 / 1575.0
    big = ~small
    x = 3.0 * phi_arr[big]
    ratio[big] = (1.0 / np.tanh(x) - 1.0 / x) / phi_arr[big]

    eta = ratio / (1.0 + phi_arr ** 2 * ratio / biot_arr)
    return eta if eta.ndim else float(eta)


def thiele_biot(k: float, radius: float, diffusivity: float, mass_transfer: float) -> Tuple[float, float]:
    """Dimensionless groups (Phi, B) from the four dimensional pellet parameters."""
    values = np.array([k, radius, diffusivity, mass_transfer], dtype=float)
    if np.any(values <= 0):
        raise InvalidInputError("pellet parameters must be strictly positive")
    return float(np.sqrt(k * radius ** 2 / diffusivity)), float(mass_transfer * radius / diffusivity)


def regime_of(phi, biot):
    """
    Asymptotic regime of eta: 1 where eta ~ B/Phi^2, 2 where eta ~ 1/Phi,
    3 where eta ~ 1, 0 in the transition bands.
    """
    phi = np.asarray(phi, dtype=float)
    biot = np.asarray(biot, dtype=float)
    regime = np.zeros(np.broadcast(phi, biot).shape, dtype=int)
    regime[phi > np.maximum(np.sqrt(biot), biot)] = 1
    regime[(phi > 1.0) & (phi < biot)] = 2
    regime[phi < np.minimum(np.sqrt(biot), 1.0)] = 3
    return regime if regime.ndim else int(regime)


def regime_approximation(regime: int, phi, biot):
    """Leading-order eta of a regime."""
    phi = np.asarray(phi, dtype=float)
    biot = np.asarray(biot, dtype=float)
    if regime == 1:
        return biot / phi ** 2
    if regime == 2:
        return 1.0 / phi
    if regime == 3:
        return np.ones(np.broadcast(phi, biot).shape)
    raise InvalidInputError(f"Unknown regime {regime}")


def conservation_totals(model: ModelId, states: np.ndarray) -> np.ndarray:
    """
    Conserved substrate and enzyme totals along a trajectory.

    Returns:
        np.ndarray: (T, 2) columns substrate total, enzyme total
    """
    spec = get_spec(model)
    states = np.asarray(states, dtype=float)
    if spec.model_id is ModelId.MSP_FULL:
        s0, es0, es1, s1, s2, e = states.T
        return np.column_stack([s0 + s1 + s2 + es0 + es1, e + es0 + es1])
    if spec.model_id is ModelId.TOY_ENZYME:
        s0, es0, s1, e = states.T
        return np.column_stack([s0 + s1 + es0, e + es0])
    raise UnsupportedModelError(f"{spec.model_id.value} has no conservation laws registered")


def delayed_observable(model: ModelId, species: Sequence[str], n_delays: int, stride: float) -> Observable:
    """Time-delay observable: `n_delays` samples every `stride` time units of each named species."""
    indices = tuple(resolve_state_index(model, name) for name in species)
    return Observable(indices, tuple(stride * (i + 1) for i in range(n_delays)))


def resolve_state_index(model: ModelId, name_or_index) -> int:
    """State index from a species name or an integer-like string."""
    spec = get_spec(model)
    if isinstance(name_or_index, (int, np.integer)):
        index = int(name_or_index)
    elif str(name_or_index).lstrip("-").isdigit():
        index = int(name_or_index)
    elif name_or_index in spec.state_names:
        return spec.state_names.index(name_or_index)
    else:
        raise InvalidInputError(f"{spec.model_id.value} has no state named {name_or_index!r}")
    if not 0 <= index < spec.n_states:
        raise InvalidInputError(f"State index {index} out of range for {spec.model_id.value}")
    return index


def parse_times(spec_text: str) -> Tuple[float, ...]:
    """Parse 'start:stop:step' or a comma list into sample times."""
    text = spec_text.strip()
    if not text:
        return ()
    if ":" in text:
        parts = [float(v) for v in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise InvalidInputError(f"Invalid time range {spec_text!r}; expected start:stop:step")
        return _even_times(*parts)
    return tuple(float(v) for v in text.split(","))
