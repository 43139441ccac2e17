"""
CLI router for Geometric Harmonics fits, evaluation and gradients.
"""

import argparse
import logging
from typing import Any, Dict

from effdim.cli import CommandRouter, arg, read_table, store_for, write_table
from effdim.config import DEFAULT_DELTA
from effdim.services.extension import gh_eval, gh_fit, gh_gradient, gh_gradient_check, training_reconstruction_error

logger = logging.getLogger(__name__)

router = CommandRouter("gh", help="Geometric Harmonics function extension")


def _load(path: str):
    store, name = store_for(path)
    return store.load_gh_model(name)[0]


@router.command(
    "fit",
    arg("--coords", required=True, help="CSV of training coordinates"),
    arg("--values", required=True, help="CSV of function values, row-aligned with --coords"),
    arg("--epsilon", type=float, default=None),
    arg("--delta", type=float, default=DEFAULT_DELTA),
    arg("--normalized", action="store_true", help="Use the row-normalized kernel basis"),
    arg("--out", required=True, help="Bundle path without suffix (writes .json and .bin)"),
)
def fit(args: argparse.Namespace) -> Dict[str, Any]:
    """Fit a GH model and save it as a JSON+binary bundle."""
    values = read_table(args.values)
    model = gh_fit(read_table(args.coords), values, epsilon=args.epsilon, delta=args.delta,
                   normalized=args.normalized)
    store, name = store_for(args.out)
    store.save_gh_model(name, model)
    return {
        "out": args.out,
        "epsilon": model.epsilon,
        "modes": int(model.basis_eigvals.size),
        "training_error": training_reconstruction_error(model, values),
    }


@router.command(
    "eval",
    arg("--model", required=True, help="Bundle path without suffix"),
    arg("--coords", required=True),
    arg("--out", required=True),
)
def evaluate(args: argparse.Namespace) -> Dict[str, Any]:
    """Evaluate a saved GH model at new coordinates."""
    model = _load(args.model)
    values = gh_eval(model, read_table(args.coords))
    write_table(args.out, values, [f"f{j}" for j in range(values.shape[1])])
    return {"out": args.out, "rows": values.shape[0]}


@router.command(
    "grad",
    arg("--model", required=True, help="Bundle path without suffix"),
    arg("--coords", required=True),
    arg("--out", required=True, help="CSV with one row per point, columns d f_o / d x_j"),
    arg("--check", action="store_true", help="Also compare against central finite differences"),
)
def gradient(args: argparse.Namespace) -> Dict[str, Any]:
    """Closed-form GH gradients at new coordinates."""
    model = _load(args.model)
    coords = read_table(args.coords)
    grads = gh_gradient(model, coords)
    m, n_out, dim = grads.shape
    write_table(args.out, grads.reshape(m, n_out * dim),
                [f"df{o}_dx{j}" for o in range(n_out) for j in range(dim)])
    result: Dict[str, Any] = {"out": args.out, "rows": m}
    if args.check:
        result["max_relative_fd_deviation"] = gh_gradient_check(model, coords)
    return result
