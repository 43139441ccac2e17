"""
CLI router for transient dataset generation.
"""

import argparse
import logging
from typing import Any, Dict

from effdim.cli import (
    CommandRouter,
    arg,
    enum_arg,
    integrator_args,
    integrator_kwargs,
    observable_from,
    parse_floats,
    read_table,
    store_for,
)
from effdim.config import get_config
from effdim.services.dataset_factory import SamplingMode, SamplingPlan, build_transient_dataset, train_test_split
from effdim.services.model_zoo import ModelId, get_spec

logger = logging.getLogger(__name__)

router = CommandRouter("sample", help="Sample parameters and record behaviors", default_verb="transient")


def plan_from_args(args: argparse.Namespace, count: int, stream: str) -> SamplingPlan:
    """Sampling plan from --base, --mode, --width and --seed."""
    spec = get_spec(args.model)
    base = parse_floats(args.base) if args.base else spec.base_point
    width = parse_floats(args.width)
    seed = args.seed if args.seed is not None else (get_config()["seed"] or 0)
    return SamplingPlan(tuple(base), args.mode, width[0] if len(width) == 1 else width, count, seed, stream)


def sampling_args():
    return [
        enum_arg("--model", ModelId, required=True),
        arg("--base", help="Comma-separated base point; the catalog default when omitted"),
        enum_arg("--mode", SamplingMode, default=SamplingMode.UNIFORM_FRACTION),
        arg("--width", default="0.1", help="Fraction, or decades (one value or one per parameter)"),
        arg("--seed", type=int, default=None, help="Root seed; EFFDIM_SEED or 0 when omitted"),
        arg("--species", help="Comma-separated observed species; the catalog default when omitted"),
        arg("--times", help="Observation times; the catalog default when omitted"),
        arg("--ic", help="CSV with one initial-state row"),
    ]


@router.command(
    "transient",
    *sampling_args(),
    arg("--count", type=int, required=True),
    arg("--out", required=True, help="Dataset directory"),
    arg("--workers", type=int, default=None, help="Process count; EFFDIM_WORKERS when omitted"),
    *integrator_args(),
)
def transient(args: argparse.Namespace) -> Dict[str, Any]:
    """Sample parameters around a base point and simulate every row."""
    plan = plan_from_args(args, args.count, "sample")
    ic = read_table(args.ic)[0] if args.ic else None
    workers = args.workers or get_config()["workers"]
    dataset = build_transient_dataset(args.model, plan, ic, observable_from(args.model, args.species, args.times),
                                      workers=workers, **integrator_kwargs(args))
    store, name = store_for(args.out)
    spec = get_spec(args.model)
    store.save_dataset(name, dataset, spec.param_names, spec.effective_names if spec.is_algebraic else None)
    return {"out": args.out, "rows": len(dataset), "failed": len(dataset.meta.get("dropped_indices", []))}


@router.command(
    "split",
    arg("--dataset", required=True),
    arg("--n-test", type=float, required=True, help="Row count, or a fraction when below 1"),
    arg("--seed", type=int, default=0),
    arg("--out", required=True, help="Directory receiving train/ and test/ datasets"),
)
def split(args: argparse.Namespace) -> Dict[str, Any]:
    """Seeded train/test split of a dataset directory."""
    store, name = store_for(args.dataset)
    dataset = store.load_dataset(name)
    n_test = args.n_test if args.n_test < 1 else int(args.n_test)
    train, test = train_test_split(len(dataset), n_test, args.seed, "split")
    out_store, out_name = store_for(args.out)
    out_store.save_dataset(f"{out_name}/train", dataset.subset(train))
    out_store.save_dataset(f"{out_name}/test", dataset.subset(test))
    return {"train": int(train.size), "test": int(test.size), "out": args.out}
