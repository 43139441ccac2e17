"""
CLI router for end-to-end experiment runs.
"""

import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel

from effdim.cli import CommandRouter, arg, enum_arg
from effdim.config import ExperimentId, load_experiment_config, parse_experiment_config
from effdim.errors import ConfigError
from effdim.tasks.experiments import PIPELINES, run_experiment

logger = logging.getLogger(__name__)

router = CommandRouter("experiment", help="Configuration-driven experiment pipelines")


class RunResponse(BaseModel):
    """Outcome of one experiment run as printed on the command line."""
    experiment: str
    seed: int
    status: str
    run_dir: str
    metrics: Dict[str, Any]
    checks: List[Dict[str, Any]]
    artifacts: List[str]


@router.command("list")
def list_experiments(args: argparse.Namespace) -> Dict[str, Any]:
    """List the built-in experiments."""
    return {
        "experiments": [
            {"experiment": experiment.value, "description": (func.__doc__ or "").strip().splitlines()[0]}
            for experiment, func in PIPELINES.items()
        ]
    }


@router.command(
    "run",
    arg("--config", default=None, help="TOML or JSON experiment config"),
    enum_arg("--experiment", ExperimentId, default=None, help="Run with defaults instead of a config file"),
    arg("--seed", type=int, default=None),
    arg("--count", type=int, default=None, help="Overrides every sample count (smoke runs)"),
    arg("--run-dir", default=None, help="Output directory; <output_dir>/<experiment>_seed<seed> by default"),
    arg("--no-report", action="store_true"),
    response_model=RunResponse,
)
def run(args: argparse.Namespace) -> Dict[str, Any]:
    """Run one experiment end to end and report its checks."""
    if args.config:
        config = load_experiment_config(Path(args.config))
        if args.experiment is not None and args.experiment is not config.experiment:
            logger.warning(f"--experiment {args.experiment.value} ignored; config names {config.experiment.value}")
    elif args.experiment is not None:
        config = parse_experiment_config({"experiment": args.experiment.value})
    else:
        raise ConfigError("experiment run needs --config or --experiment")
    updates: Dict[str, Any] = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.count is not None:
        # every count shrinks together so smoke runs finish in seconds
        updates["counts"] = config.counts.model_copy(update={
            "n_samples": args.count, "n_starts": args.count, "n_unseen": args.count,
            "n_test": max(1, args.count // 5)})
    if updates:
        config = config.model_copy(update=updates)
    run_dir: Optional[Path] = Path(args.run_dir) if args.run_dir else None
    manifest = run_experiment(config, run_dir, report=not args.no_report)
    return manifest.summary()
