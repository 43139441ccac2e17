"""
CLI router for least-squares fits to a reference behavior.
"""

import argparse
import logging
from typing import Any, Dict, Optional

import numpy as np

from effdim.cli import CommandRouter, arg, enum_arg, integrator_args, integrator_kwargs, observable_from, \
    parse_floats, read_table, store_for
from effdim.config import DEFAULT_FD_STEP, DEFAULT_FIT_ITERATIONS, DEFAULT_GTOL, get_config
from effdim.services.dataset_factory import SamplingMode, SamplingPlan, build_optimization_dataset, fit_to_reference
from effdim.services.model_zoo import ModelId, forward_observations, get_spec

logger = logging.getLogger(__name__)

router = CommandRouter("fit", help="Least-squares fits and minimizer sets", default_verb="multistart")


def _fit_args():
    return [
        enum_arg("--model", ModelId, required=True),
        arg("--reference", help="CSV with one observation row; the behavior at --reference-params when omitted"),
        arg("--reference-params", help="Comma-separated parameters; the catalog base point when omitted"),
        arg("--species"),
        arg("--times"),
        arg("--max-iterations", type=int, default=DEFAULT_FIT_ITERATIONS),
        arg("--gtol", type=float, default=DEFAULT_GTOL),
        arg("--fd-step", type=float, default=DEFAULT_FD_STEP),
        *integrator_args(),
    ]


def _reference(args: argparse.Namespace, observable) -> np.ndarray:
    if args.reference:
        return read_table(args.reference)[0]
    params: Optional[tuple] = parse_floats(args.reference_params) if args.reference_params else None
    point = np.asarray(params if params is not None else get_spec(args.model).base_point)
    outputs, _ = forward_observations(args.model, point, None, observable, **integrator_kwargs(args))
    return outputs[0]


def _fit_kwargs(args: argparse.Namespace) -> Dict[str, Any]:
    kwargs = {"max_iterations": args.max_iterations, "gtol": args.gtol, "fd_step": args.fd_step}
    kwargs.update(integrator_kwargs(args))
    return kwargs


@router.command(
    "single",
    *_fit_args(),
    arg("--start", required=True, help="Comma-separated starting parameters"),
)
def single(args: argparse.Namespace) -> Dict[str, Any]:
    """Fit one start to the reference behavior."""
    observable = observable_from(args.model, args.species, args.times)
    result = fit_to_reference(args.model, _reference(args, observable), np.asarray(parse_floats(args.start)),
                              observable=observable, **_fit_kwargs(args))
    return {
        "argmin": result.argmin,
        "objective_value": result.objective_value,
        "converged": result.converged,
        "iterations": result.iterations,
        "gradient_norm": result.gradient_norm,
        "method": result.method,
    }


@router.command(
    "multistart",
    *_fit_args(),
    arg("--starts", type=int, required=True),
    enum_arg("--mode", SamplingMode, default=SamplingMode.LOG_UNIFORM_RANGE),
    arg("--width", default="3", help="Start spread around the base point (decades or fraction)"),
    arg("--base", help="Comma-separated start center; the catalog base point when omitted"),
    arg("--seed", type=int, default=None),
    arg("--workers", type=int, default=None),
    arg("--out", required=True, help="Dataset directory of converged minimizers"),
)
def multistart(args: argparse.Namespace) -> Dict[str, Any]:
    """Multi-start fits whose converged minimizers sample the reference level set."""
    spec = get_spec(args.model)
    observable = observable_from(args.model, args.species, args.times)
    width = parse_floats(args.width)
    seed = args.seed if args.seed is not None else (get_config()["seed"] or 0)
    plan = SamplingPlan(parse_floats(args.base) if args.base else spec.base_point, args.mode,
                        width[0] if len(width) == 1 else width, args.starts, seed, "starts")
    dataset = build_optimization_dataset(args.model, _reference(args, observable), args.starts, plan,
                                         observable=observable, workers=args.workers or get_config()["workers"],
                                         **_fit_kwargs(args))
    store, name = store_for(args.out)
    store.save_dataset(name, dataset, spec.param_names)
    return {"out": args.out, "converged": len(dataset), "convergence_rate": dataset.meta["convergence_rate"]}
