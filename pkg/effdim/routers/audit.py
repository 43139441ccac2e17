"""
CLI router for identifiability audits.
"""

import argparse
import logging
from typing import Any, Dict

import numpy as np

from effdim.cli import CommandRouter, arg, enum_arg, integrator_args, integrator_kwargs, observable_from, \
    parse_floats, read_table, store_for
from effdim.services.extension import gh_eval
from effdim.services.identifiability import (
    DEFAULT_RANK_THRESHOLD,
    DEFAULT_SENSITIVITY_STEP,
    determinant_histogram,
    injectivity_scan,
    jacobian_determinants,
    nullspace_residuals,
    sensitivity_nullspace,
    spectral_gap,
)
from effdim.services.model_zoo import ModelId, get_spec

logger = logging.getLogger(__name__)

router = CommandRouter("audit", help="Invertibility and identifiability audits")


@router.command(
    "invertibility",
    arg("--model", required=True, help="GH bundle path without suffix"),
    arg("--points", required=True, help="CSV of points the map is audited on"),
    arg("--scale-normalize", action="store_true", help="Divide each determinant by the product of row norms"),
    arg("--out-tol", type=float, default=None, help="Injectivity scan: output closeness"),
    arg("--in-tol", type=float, default=None, help="Injectivity scan: input distance"),
    arg("--bins", type=int, default=50),
    arg("--out", required=True, help="Directory receiving invertibility.json and determinant_histogram.csv"),
)
def invertibility(args: argparse.Namespace) -> Dict[str, Any]:
    """Jacobian determinants and an optional injectivity scan of a saved GH map."""
    store, name = store_for(args.model)
    model, _ = store.load_gh_model(name)
    points = read_table(args.points)
    report = jacobian_determinants(model, points, scale_normalize=args.scale_normalize)
    if args.out_tol is not None and args.in_tol is not None:
        report.injectivity_violations.extend(injectivity_scan(points, gh_eval(model, points),
                                                              args.out_tol, args.in_tol))
    counts, edges = determinant_histogram(report.determinants, args.bins)
    out_store, out_name = store_for(args.out)
    out_store.save_csv(f"{out_name}/determinants.csv", report.determinants, ["det"])
    out_store.save_csv(f"{out_name}/determinant_histogram.csv",
                       np.column_stack([edges[:-1], edges[1:], counts]), ["left", "right", "count"])
    summary = report.summary()
    out_store.save_json(f"{out_name}/invertibility.json", summary)
    return summary


@router.command(
    "nullspace",
    enum_arg("--model", ModelId, required=True),
    arg("--point", help="Comma-separated parameters; the catalog base point when omitted"),
    arg("--species"),
    arg("--times"),
    arg("--fd-step", type=float, default=DEFAULT_SENSITIVITY_STEP),
    arg("--threshold", type=float, default=DEFAULT_RANK_THRESHOLD, help="Relative singular-value cutoff"),
    arg("--out", default=None, help="JSON report path"),
    *integrator_args(),
)
def nullspace(args: argparse.Namespace) -> Dict[str, Any]:
    """Sensitivity nullspace (log-parameter directions) at one parameter point."""
    point = np.asarray(parse_floats(args.point) if args.point else get_spec(args.model).base_point)
    basis = sensitivity_nullspace(args.model, point, observable_from(args.model, args.species, args.times),
                                  fd_step=args.fd_step, rank_threshold=args.threshold, **integrator_kwargs(args))
    rank_by_gap, gap = spectral_gap(basis.singular_values)
    result = {
        "dimension": basis.dimension,
        "rank": basis.rank,
        "rank_by_gap": rank_by_gap,
        "gap_ratio": gap,
        "singular_values": basis.singular_values,
        "fim_eigenvalues": basis.fim_eigenvalues,
        "basis_vectors": basis.basis_vectors.T,
        "residuals": nullspace_residuals(basis),
    }
    if args.out:
        store, name = store_for(args.out)
        store.save_json(name, result)
    return result
