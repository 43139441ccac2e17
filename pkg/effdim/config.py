"""
Configuration module for the effdim application.
Loads runtime settings from environment variables and experiment settings from
a TOML or JSON file validated in strict mode.
"""

import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from effdim.errors import ConfigError

# Numerical defaults shared by services and routers
DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
DEFAULT_MAX_STEPS = 200_000
DEFAULT_FD_STEP = 1e-6
DEFAULT_GTOL = 1e-8
DEFAULT_FIT_ITERATIONS = 2000
DEFAULT_ALPHA = 1
DEFAULT_C_EXPONENT = 4.0
DEFAULT_R_CUTOFF = 0.2
DEFAULT_DELTA = 1e-6
DEFAULT_MAX_DENSE_N = 20_000
DEFAULT_ALPHA_ORTHO = 33.0

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def get_config() -> Dict[str, Any]:
    """Load and validate runtime configuration from environment variables."""

    load_dotenv()

    seed_raw = os.getenv('EFFDIM_SEED')
    try:
        seed = int(seed_raw) if seed_raw not in (None, "") else None
    except ValueError:
        raise ConfigError(f"Invalid EFFDIM_SEED: {seed_raw}. Must be an integer")

    log_level = os.getenv('EFFDIM_LOG_LEVEL', 'INFO').upper()
    if log_level not in LOG_LEVELS:
        raise ConfigError(f"Invalid EFFDIM_LOG_LEVEL: {log_level}. Must be one of: {', '.join(LOG_LEVELS)}")

    try:
        workers = int(os.getenv('EFFDIM_WORKERS', '1'))
        max_dense_n = int(os.getenv('EFFDIM_MAX_DENSE_N', str(DEFAULT_MAX_DENSE_N)))
    except ValueError as e:
        raise ConfigError(f"Invalid integer environment setting: {e}")
    if workers < 1:
        raise ConfigError(f"Invalid EFFDIM_WORKERS: {workers}. Must be at least 1")

    return {
        "seed": seed,
        "output_dir": os.getenv('EFFDIM_OUTPUT_DIR', 'runs'),
        "log_level": log_level,
        "workers": workers,
        "max_dense_n": max_dense_n,
    }


class ExperimentId(str, Enum):
    MSP_DIMENSION_COUNT = "msp_dimension_count"
    MSP_PHI_TO_KAPPA = "msp_phi_to_kappa"
    MSP_BEHAVIOR_PREDICTION = "msp_behavior_prediction"
    MSP_PARAMETER_ESTIMATION = "msp_parameter_estimation"
    TOY_CAE_LEVELSETS = "toy_cae_levelsets"
    TOY_JSF = "toy_jsf"
    COMPARTMENTAL_FULL = "compartmental_full"
    EFFECTIVENESS_FACTOR_REGIMES = "effectiveness_factor_regimes"
    SPIRAL_JSF = "spiral_jsf"


class StrictModel(BaseModel):
    """Base for every config section: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


class CountsConfig(StrictModel):
    """Sample counts; None means the experiment's own default."""
    n_samples: Optional[int] = Field(None, ge=1)
    n_test: Optional[int] = Field(None, ge=0)
    n_starts: Optional[int] = Field(None, ge=1)
    n_unseen: Optional[int] = Field(None, ge=1)


class KernelConfig(StrictModel):
    epsilon: Optional[float] = Field(None, gt=0)
    alpha: int = DEFAULT_ALPHA
    r_cutoff: float = Field(DEFAULT_R_CUTOFF, gt=0)
    c_exponent: float = DEFAULT_C_EXPONENT
    n_eigenvectors: int = Field(12, ge=2)
    regression_subsample: int = Field(2000, ge=10)

    @field_validator("alpha")
    @classmethod
    def _alpha_binary(cls, value: int) -> int:
        if value not in (0, 1):
            raise ValueError("alpha must be 0 or 1")
        return value


class ExtensionConfig(StrictModel):
    delta: float = Field(DEFAULT_DELTA, gt=0, lt=1)
    gh_epsilon: Optional[float] = Field(None, gt=0)


class IntegratorConfig(StrictModel):
    method: str = "RK45"
    rtol: float = Field(DEFAULT_RTOL, gt=0)
    atol: float = Field(DEFAULT_ATOL, gt=0)
    max_steps: int = Field(DEFAULT_MAX_STEPS, ge=1)
    batch_size: int = Field(256, ge=1)


class FitConfig(StrictModel):
    max_iterations: int = Field(DEFAULT_FIT_ITERATIONS, ge=1)
    gtol: float = Field(DEFAULT_GTOL, gt=0)
    fd_step: float = Field(DEFAULT_FD_STEP, gt=0)
    start_decades: float = Field(3.0, gt=0)
    integrator_method: str = "LSODA"
    rtol: float = Field(1e-10, gt=0)
    atol: float = Field(1e-12, gt=0)


class TrainingConfig(StrictModel):
    epochs: int = Field(20_000, ge=1)
    lr: float = Field(1e-3, gt=0)
    alpha_ortho: float = Field(DEFAULT_ALPHA_ORTHO, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)
    patience: int = Field(2000, ge=1)
    optimizer: str = "adam"
    hidden_units: int = Field(20, ge=1)
    hidden_layers: int = Field(4, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    jacobian_mode: str = "autograd"

    @field_validator("optimizer")
    @classmethod
    def _known_optimizer(cls, value: str) -> str:
        if value not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        return value

    @field_validator("jacobian_mode")
    @classmethod
    def _known_jacobian_mode(cls, value: str) -> str:
        if value not in ("autograd", "finite_difference"):
            raise ValueError("jacobian_mode must be 'autograd' or 'finite_difference'")
        return value


class JSFConfig(StrictModel):
    d: Optional[int] = Field(None, ge=1)
    M: int = Field(5, ge=1)
    R: Optional[int] = Field(None, ge=1)


class RegimeConfig(StrictModel):
    """Which toy-model base point the CAE experiment perturbs around."""
    base: str = "k2"

    @field_validator("base")
    @classmethod
    def _known_base(cls, value: str) -> str:
        if value not in ("k1", "k2"):
            raise ValueError("regime base must be 'k1' or 'k2'")
        return value


class ChecksConfig(StrictModel):
    enabled: bool = True
    min_samples: int = Field(200, ge=1)


class ExperimentConfig(StrictModel):
    """Resolved settings of one experiment run."""
    experiment: ExperimentId
    seed: int = 0
    output_dir: Optional[str] = None
    counts: CountsConfig = CountsConfig()
    kernel: KernelConfig = KernelConfig()
    extension: ExtensionConfig = ExtensionConfig()
    integrator: IntegratorConfig = IntegratorConfig()
    fit: FitConfig = FitConfig()
    training: TrainingConfig = TrainingConfig()
    jsf: JSFConfig = JSFConfig()
    regime: RegimeConfig = RegimeConfig()
    checks: ChecksConfig = ChecksConfig()


def parse_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a raw settings tree and apply environment overrides.

    Args:
        data: Parsed settings tree

    Returns:
        ExperimentConfig: Strictly validated config with EFFDIM_SEED and
        EFFDIM_OUTPUT_DIR applied
    """
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {e}")

    env = get_config()
    updates: Dict[str, Any] = {}
    if env["seed"] is not None:
        updates["seed"] = env["seed"]
    if config.output_dir is None:
        updates["output_dir"] = env["output_dir"]
    return config.model_copy(update=updates) if updates else config


def load_experiment_config(path: Path) -> ExperimentConfig:
    """
    Read an experiment config from a TOML or JSON file.

    Args:
        path: Config file; the suffix selects the parser

    Returns:
        ExperimentConfig: The validated config
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        elif path.suffix == ".json":
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        else:
            raise ConfigError(f"Unsupported config format: {path.suffix}. Use .toml or .json")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not parse {path}: {e}")
    return parse_experiment_config(data)
