"""
CLI router for diffusion maps: embedding, Nystrom restriction, scale sweeps and PCA.
"""

import argparse
import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np

from effdim.cli import CommandRouter, arg, enum_arg, store_for, write_table
from effdim.config import DEFAULT_ALPHA, DEFAULT_C_EXPONENT, DEFAULT_R_CUTOFF
from effdim.errors import InvalidInputError
from effdim.services.dataset_factory import Dataset
from effdim.services.dmaps_core import (
    KernelContext,
    KernelSpec,
    KernelVariant,
    build_kernel_context,
    embed_dataset,
    epsilon_sweep,
    pca,
    residual_gap,
)
from effdim.services.extension import nystrom_extend
from effdim.services.reporting import PlotSpec, render_plot_script

logger = logging.getLogger(__name__)

router = CommandRouter("dmaps", help="Diffusion maps embeddings", default_verb="embed")


def load_blocks(path: str, variant: KernelVariant, log_inputs: bool = False,
                log_outputs: bool = False) -> Tuple[Dataset, Optional[np.ndarray], Optional[np.ndarray]]:
    """Dataset and the blocks a kernel variant reads."""
    store, name = store_for(path)
    dataset = store.load_dataset(name)
    inputs = np.log10(dataset.inputs) if log_inputs else dataset.inputs
    outputs = np.log10(dataset.outputs) if log_outputs else dataset.outputs
    points_in = None if variant is KernelVariant.PLAIN_OUTPUT else inputs
    points_out = None if variant is KernelVariant.PLAIN_INPUT else outputs
    return dataset, points_in, points_out


def rebuild_context(embedding_dir: str, dataset_dir: str) -> KernelContext:
    """Kernel context of a saved embedding, recomputed from its training dataset."""
    store, name = store_for(embedding_dir)
    selection = store.load_json(f"{name}/selection.json")
    variant = KernelVariant(selection["variant"])
    _, points_in, points_out = load_blocks(dataset_dir, variant, selection.get("log_inputs", False),
                                           selection.get("log_outputs", False))
    spec = KernelSpec(variant, float(selection["epsilon"]), float(selection["c_exponent"]))
    context, _ = build_kernel_context(points_in, points_out, spec, int(selection["alpha"]))
    return context


@router.command(
    "embed",
    arg("--dataset", required=True),
    enum_arg("--kernel", KernelVariant, default=KernelVariant.PLAIN_INPUT),
    arg("--epsilon", type=float, default=None, help="Kernel scale; median heuristic when omitted"),
    arg("--alpha", type=int, choices=(0, 1), default=DEFAULT_ALPHA),
    arg("-k", type=int, default=10, help="Nontrivial eigenvectors"),
    arg("--r-cutoff", type=float, default=DEFAULT_R_CUTOFF),
    arg("--c-exponent", type=float, default=DEFAULT_C_EXPONENT),
    arg("--subsample", type=int, default=2000, help="Rows used for the local linear regressions"),
    arg("--seed", type=int, default=0),
    arg("--log-inputs", action="store_true"),
    arg("--log-outputs", action="store_true"),
    arg("--out", required=True, help="Embedding directory"),
)
def embed(args: argparse.Namespace) -> Dict[str, Any]:
    """Embed a dataset and select its non-harmonic eigenvectors."""
    dataset, points_in, points_out = load_blocks(args.dataset, args.kernel, args.log_inputs, args.log_outputs)
    if not 1 <= args.k < len(dataset):
        raise InvalidInputError(f"-k must satisfy 1 <= k < N={len(dataset)}")
    embedding, context = embed_dataset(points_in, points_out, args.kernel, epsilon=args.epsilon, alpha=args.alpha,
                                       k=args.k, r_cutoff=args.r_cutoff, c_exponent=args.c_exponent,
                                       subsample=args.subsample, seed=args.seed)
    store, name = store_for(args.out)
    store.save_embedding(name, embedding, {
        "variant": args.kernel.value,
        "epsilon": context.spec.epsilon,
        "c_exponent": context.spec.c_exponent,
        "log_inputs": args.log_inputs,
        "log_outputs": args.log_outputs,
        "dataset": str(args.dataset),
    })
    return {
        "out": args.out,
        "epsilon": context.spec.epsilon,
        "nonharmonic_indices": embedding.nonharmonic_indices,
        "residual_gap": residual_gap(embedding),
    }


@router.command(
    "extend",
    arg("--embedding", required=True),
    arg("--dataset", required=True, help="Training dataset of the embedding"),
    arg("--new", required=True, help="Dataset directory of the points to restrict"),
    arg("--out", required=True, help="CSV of restricted coordinates"),
)
def extend(args: argparse.Namespace) -> Dict[str, Any]:
    """Nystrom restriction of new points into a saved embedding."""
    store, name = store_for(args.embedding)
    embedding = store.load_embedding(name)
    context = rebuild_context(args.embedding, args.dataset)
    selection = store.load_json(f"{name}/selection.json")
    _, new_in, new_out = load_blocks(args.new, context.spec.variant, selection.get("log_inputs", False),
                                     selection.get("log_outputs", False))
    result = nystrom_extend(embedding, context, new_in, new_out)
    write_table(args.out, result.coords, [f"phi{j}" for j in result.indices])
    return {"out": args.out, "rows": result.coords.shape[0], "indices": list(result.indices)}


@router.command(
    "epsilon",
    arg("--dataset", required=True),
    arg("--block", choices=("inputs", "outputs"), default="inputs"),
    arg("--log", action="store_true", help="Sweep on log10 values"),
    arg("--out", required=True, help="Directory receiving epsilon_sweep.csv and its plot script"),
)
def epsilon(args: argparse.Namespace) -> Dict[str, Any]:
    """Kernel-sum sweep over epsilon, for picking the scale by eye."""
    store, name = store_for(args.dataset)
    dataset = store.load_dataset(name)
    points = dataset.inputs if args.block == "inputs" else dataset.outputs
    eps, sums = epsilon_sweep(np.log10(points) if args.log else points)
    out_store, out_name = store_for(args.out)
    out_store.save_csv(f"{out_name}/epsilon_sweep.csv", np.column_stack([eps, sums]), ["epsilon", "kernel_sum"])
    plot = PlotSpec("scatter", "epsilon_sweep.csv", "epsilon_sweep.py", f"kernel sum against epsilon ({args.block})",
                    xlabel="epsilon", ylabel="sum A_ij", loglog=True)
    script = out_store.path(f"{out_name}/{plot.script}")
    script.write_text(render_plot_script(plot), encoding="utf-8")
    slopes = np.gradient(np.log(sums), np.log(eps))
    return {"out": args.out, "max_slope": float(np.max(slopes)), "dimension_estimate": float(2.0 * np.max(slopes))}


@router.command(
    "pca",
    arg("--dataset", required=True),
    arg("--block", choices=("inputs", "outputs"), default="inputs"),
    arg("--log", action="store_true"),
    arg("--variance", type=float, default=0.99),
)
def principal_components(args: argparse.Namespace) -> Dict[str, Any]:
    """Explained-variance spectrum of a dataset block."""
    store, name = store_for(args.dataset)
    dataset = store.load_dataset(name)
    points = dataset.inputs if args.block == "inputs" else dataset.outputs
    summary = pca(np.log10(points) if args.log else points)
    cumulative = np.cumsum(summary.explained_variance_ratio)
    return {
        "explained_variance_ratio": summary.explained_variance_ratio,
        "components_for_variance": int(np.searchsorted(cumulative, args.variance) + 1),
    }
