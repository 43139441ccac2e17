"""
Error types for the effdim package.
Each error carries the process exit code the CLI reports for it.
"""

from typing import Iterable, List, Optional


class EffdimError(Exception):
    """Base class for all errors raised by effdim."""

    exit_code = 3


class ConfigError(EffdimError, ValueError):
    """Invalid configuration file, environment variable or CLI argument."""

    exit_code = 2


class NumericError(EffdimError):
    """A numerical stage could not produce a valid result."""

    exit_code = 3


class DimensionMismatchError(NumericError, ValueError):
    """Array shapes do not match what the operation requires."""


class UnsupportedModelError(NumericError):
    """The requested operation is not defined for this model."""


class IntegrationError(NumericError):
    """ODE integration failed; carries the last time reached with a finite state."""

    def __init__(self, message: str, last_good_time: float = 0.0):
        super().__init__(f"{message} (last good time: {last_good_time:g})")
        self.last_good_time = last_good_time


class DatasetError(NumericError):
    """Dataset generation failed too often to be trusted."""


class EmbeddingError(NumericError):
    """Kernel construction or eigendecomposition failed."""

    def __init__(self, message: str, residual: Optional[float] = None):
        if residual is not None:
            message = f"{message} (residual: {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class ExtensionError(NumericError):
    """Out-of-sample extension could not be built."""


class TrainingError(NumericError):
    """Network training diverged or produced non-finite values."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class ReportError(EffdimError):
    """Report emission found missing artifacts."""

    exit_code = 3

    def __init__(self, missing: Iterable[str]):
        self.missing: List[str] = list(missing)
        super().__init__("Missing artifacts: " + ", ".join(self.missing))


class AcceptanceError(EffdimError):
    """A built-in experiment check failed."""

    exit_code = 4

    def __init__(self, failed: Iterable[str]):
        self.failed: List[str] = list(failed)
        super().__init__("Failed checks: " + ", ".join(self.failed))


class InvalidInputError(EffdimError, ValueError):
    """An argument violates an operation's precondition."""

    exit_code = 2
