"""
Main effdim command-line application module.
"""

import logging
import sys
from typing import Optional, Sequence

from effdim import __version__
from effdim.cli import CLIApp
from effdim.config import LOG_LEVELS, get_config
from effdim.errors import ConfigError, EffdimError
from effdim.routers import audit, cae, dmaps, experiment, fit, gh, jsf, model, report, sample

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Create CLI app
app = CLIApp(
    prog="effdim",
    description="Data-driven discovery of effective parameters from simulated behavior",
    version=__version__,
)

# Include routers
for router in (model.router, sample.router, fit.router, dmaps.router, gh.router, cae.router, jsf.router,
               audit.router, experiment.router, report.router):
    app.include_router(router)


# Global exception handlers
@app.exception_handler(EffdimError)
def effdim_error_handler(exc: EffdimError) -> int:
    """Known failures: one log line and the error's own exit code."""
    logger.error(f"{type(exc).__name__}: {exc}")
    return exc.exit_code


@app.exception_handler(Exception)
def global_exception_handler(exc: Exception) -> int:
    """Handle all unhandled exceptions."""
    logger.error(f"Unhandled exception: {exc}", exc_info=True)
    return 3


def setup_logging(level: Optional[str] = None) -> None:
    level = (level or get_config()["log_level"]).upper()
    if level not in LOG_LEVELS:
        raise ConfigError(f"Invalid log level: {level}. Must be one of: {', '.join(LOG_LEVELS)}")
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one `effdim <noun> <verb>` command.

    Returns:
        int: Process exit code (0 success, 2 config, 3 numeric, 4 acceptance)
    """
    try:
        args = app.parse(argv)
        setup_logging(args.log_level)
        logger.debug(f"effdim {__version__}: {args.noun} {args.verb}")
        return app.dispatch(args)
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)
    except Exception as e:
        if not logging.getLogger().handlers:
            logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        return app.handle(e)


if __name__ == "__main__":
    sys.exit(main())
