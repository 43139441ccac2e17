"""
CLI router for conformal autoencoders: training, encoding, decoding and level sets.
"""

import argparse
import logging
from typing import Any, Dict

import numpy as np

from effdim.cli import CommandRouter, arg, enum_arg, integrator_args, integrator_kwargs, parse_floats, read_table, \
    store_for, write_table
from effdim.config import TrainingConfig
from effdim.services.conformal_ae import (
    ConformalAutoencoder,
    conformality_residual,
    load_model_state,
    model_meta,
    model_state_arrays,
    redundant_grid,
    trace_level_set,
    train_conformal_ae,
)
from effdim.services.model_zoo import ModelId

logger = logging.getLogger(__name__)

router = CommandRouter("cae", help="Conformal autoencoders")


def load_model(path: str) -> ConformalAutoencoder:
    store, name = store_for(path)
    arrays, meta = store.load_bundle(name)
    return load_model_state(arrays, meta)


@router.command(
    "train",
    arg("--dataset", required=True),
    arg("--d-eff", type=int, required=True, help="Number of meaningful latents"),
    arg("--epochs", type=int, default=20_000),
    arg("--lr", type=float, default=1e-3),
    arg("--alpha-ortho", type=float, default=33.0),
    arg("--patience", type=int, default=2000),
    arg("--batch-size", type=int, default=None),
    arg("--hidden-units", type=int, default=20),
    arg("--hidden-layers", type=int, default=4, help="Hidden layers per network; 4 gives five linear layers"),
    arg("--jacobian-mode", choices=("autograd", "finite_difference"), default="autograd"),
    arg("--seed", type=int, default=0),
    arg("--log-inputs", action="store_true"),
    arg("--log-outputs", action="store_true"),
    arg("--out", required=True, help="Bundle path without suffix; the loss history goes to <out>_history.csv"),
)
def train(args: argparse.Namespace) -> Dict[str, Any]:
    """Train a conformal autoencoder on a dataset directory."""
    config = TrainingConfig(epochs=args.epochs, lr=args.lr, alpha_ortho=args.alpha_ortho, patience=args.patience,
                            batch_size=args.batch_size, hidden_units=args.hidden_units,
                            hidden_layers=args.hidden_layers, jacobian_mode=args.jacobian_mode)
    store, name = store_for(args.dataset)
    dataset = store.load_dataset(name)
    model = train_conformal_ae(dataset, args.d_eff, config, args.seed, args.log_inputs, args.log_outputs)

    out_store, out_name = store_for(args.out)
    out_store.save_bundle(out_name, model_state_arrays(model), model_meta(model, config))
    history = np.array([[h["epoch"], h["reconstruction"], h["orthogonality"], h["behavior"], h["total"]]
                        for h in model.history])
    out_store.save_csv(f"{out_name}_history.csv", history,
                       ["epoch", "reconstruction", "orthogonality", "behavior", "total"])
    residuals = conformality_residual(model, dataset.inputs[model.test_rows]) if model.test_rows.size else {}
    return {
        "out": args.out,
        "epochs_run": len(model.history),
        "final_loss": model.history[-1]["total"],
        "conformality_max": max(residuals.values()) if residuals else None,
    }


@router.command(
    "encode",
    arg("--model", required=True),
    arg("--params", required=True, help="CSV of parameter rows"),
    arg("--out", required=True),
)
def encode(args: argparse.Namespace) -> Dict[str, Any]:
    """Latents of parameter rows."""
    model = load_model(args.model)
    latents = model.encode(read_table(args.params))
    write_table(args.out, latents, [f"nu{j + 1}" for j in range(latents.shape[1])])
    return {"out": args.out, "rows": latents.shape[0], "d_eff": model.d_eff}


@router.command(
    "decode",
    arg("--model", required=True),
    arg("--latents", required=True, help="CSV of latent rows"),
    arg("--out", required=True),
)
def decode(args: argparse.Namespace) -> Dict[str, Any]:
    """Parameters of latent rows."""
    model = load_model(args.model)
    params = model.decode(read_table(args.latents))
    write_table(args.out, params, [f"p{j}" for j in range(params.shape[1])])
    return {"out": args.out, "rows": params.shape[0]}


@router.command(
    "levelset",
    arg("--model", required=True),
    arg("--dataset", required=True, help="Training dataset; fixes the redundant latent ranges"),
    arg("--nu", required=True, help="Comma-separated meaningful latents"),
    arg("--grid-size", type=int, default=20, help="Grid points per redundant axis"),
    enum_arg("--simulate", ModelId, default=None, help="Re-simulate decoded points with this model"),
    arg("--out", required=True, help="CSV of decoded parameters, validity and deviation"),
    *integrator_args(),
)
def levelset(args: argparse.Namespace) -> Dict[str, Any]:
    """Decode fixed meaningful latents across a grid of redundant latents."""
    model = load_model(args.model)
    store, name = store_for(args.dataset)
    dataset = store.load_dataset(name)
    grid = redundant_grid(model, model.encode(dataset.inputs), args.grid_size)
    trace = trace_level_set(model, np.asarray(parse_floats(args.nu)), grid, sim_model=args.simulate,
                            **(integrator_kwargs(args) if args.simulate else {}))
    write_table(args.out, np.column_stack([trace.params, trace.valid.astype(float), trace.deviations]),
                [f"p{j}" for j in range(trace.params.shape[1])] + ["valid", "deviation"])
    return dict(trace.summary(), out=args.out)
