"""
CLI router for jointly smooth functions.
"""

import argparse
import logging
from typing import Any, Dict

import numpy as np

from effdim.cli import CommandRouter, arg, read_table, store_for, write_table
from effdim.services.jsf import (
    DEFAULT_M,
    JSFBasis,
    ObservationPair,
    best_match,
    compute_jsf,
    generate_spiral,
    spearman_abs,
    uncommon_directions,
)

logger = logging.getLogger(__name__)

router = CommandRouter("jsf", help="Jointly smooth functions")


def _pair(args: argparse.Namespace) -> ObservationPair:
    return ObservationPair(read_table(args.set1), read_table(args.set2))


def _save(path: str, basis: JSFBasis, prefix: str, extra: Dict[str, Any]) -> None:
    write_table(path, basis.functions, [f"{prefix}{j + 1}" for j in range(basis.M)])
    store, name = store_for(path)
    sidecar = basis.sidecar()
    sidecar.update(extra)
    store.save_json(f"{name}.json", sidecar)


def _pair_args():
    return [
        arg("--set1", required=True, help="CSV of the first observation set"),
        arg("--set2", required=True, help="CSV of the second set, row-aligned"),
        arg("-d", type=int, default=None, help="Eigenvectors per set; min(100, N/10) by default"),
        arg("-M", type=int, default=DEFAULT_M, help="Functions returned"),
        arg("--out", required=True, help="CSV of functions; the sidecar goes to <out>.json"),
    ]


@router.command("compute", *_pair_args())
def compute(args: argparse.Namespace) -> Dict[str, Any]:
    """Common functions of two observation sets."""
    basis = compute_jsf(_pair(args), args.d, args.M)
    _save(args.out, basis, "f", {})
    return {"out": args.out, "singular_values": basis.singular_values[:basis.M]}


@router.command(
    "uncommon",
    *_pair_args(),
    arg("-R", type=int, default=None, help="Common-manifold functions removed; 5 M by default"),
    arg("--target-set", type=int, choices=(1, 2), default=2),
)
def uncommon(args: argparse.Namespace) -> Dict[str, Any]:
    """Functions specific to one of the two observation sets."""
    pair = _pair(args)
    common = compute_jsf(pair, args.d, args.M)
    basis = uncommon_directions(pair, common, R=args.R, target_set=args.target_set, d=args.d)
    _save(args.out, basis, "g", {"R": args.R or 5 * common.M, "target_set": args.target_set})
    return {"out": args.out, "singular_values": basis.singular_values[:basis.M]}


@router.command(
    "spiral",
    arg("-n", type=int, default=2000),
    arg("--seed", type=int, default=0),
    arg("-M", type=int, default=DEFAULT_M),
    arg("--out", required=True, help="Directory receiving the spiral data and both function sets"),
)
def spiral(args: argparse.Namespace) -> Dict[str, Any]:
    """Spiral toy data with its common and uncommon functions."""
    sample = generate_spiral(args.n, args.seed)
    store, name = store_for(args.out)
    store.save_csv(f"{name}/spiral.csv",
                   np.column_stack([sample.pair.set1, sample.pair.set2, sample.z, sample.c]),
                   ["a", "b", "y1", "y2", "z", "c"])
    common = compute_jsf(sample.pair, M=args.M)
    other = uncommon_directions(sample.pair, common, target_set=2)
    _save(str(store.path(f"{name}/common.csv")), common, "f", {})
    _save(str(store.path(f"{name}/uncommon.csv")), other, "g", {"target_set": 2})
    index, rho_c = best_match(other.functions, sample.c)
    return {
        "out": args.out,
        "f1_z_spearman": spearman_abs(common.functions[:, 0], sample.z),
        "uncommon_c_spearman": rho_c,
        "uncommon_c_function": index + 1,
    }
