"""
Conformal autoencoder service.
Y-shaped network (encoder NN1, decoder NN2, behavior estimator NN3, optional
parameter estimator NN4) trained with alternating steps so that latent
coordinates have mutually orthogonal input gradients, plus the plain MLP
regression primitive reused for direct coordinate-to-parameter maps.
"""

import copy
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from sklearn.preprocessing import StandardScaler
from torch.func import jacrev, vmap

from effdim.config import TrainingConfig
from effdim.errors import DimensionMismatchError, InvalidInputError, TrainingError
from effdim.services.dataset_factory import Dataset, train_test_split
from effdim.services.model_zoo import ModelId, Observable, forward_observations
from effdim.services.randomness import derive_seed

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DIVERGENCE_LIMIT = 1e6
# Full-batch training up to this many rows
FULL_BATCH_LIMIT = 5000
DEFAULT_MINIBATCH = 1024
# Step of the finite-difference Jacobian fallback, in standardized units
FD_JACOBIAN_STEP = 1e-4
_LOG_EVERY = 1000


class MLP(nn.Module):
    """Fully connected network, tanh hidden layers, linear output."""

    def __init__(self, layer_dims: Sequence[int], generator: Optional[torch.Generator] = None):
        super().__init__()
        if len(layer_dims) < 2 or any(int(d) < 1 for d in layer_dims):
            raise InvalidInputError(f"Invalid layer dimensions {list(layer_dims)}")
        self.layer_dims = tuple(int(d) for d in layer_dims)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Uniform on [-sqrt(1/fan_in), sqrt(1/fan_in)] for weights and biases."""
        with torch.no_grad():
            for layer in self.layers:
                bound = math.sqrt(1.0 / layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


def mlp_dims(n_in: int, n_out: int, hidden_units: int, hidden_layers: int) -> List[int]:
    return [n_in] + [hidden_units] * hidden_layers + [n_out]


def mlp_forward(net: MLP, x: np.ndarray) -> np.ndarray:
    """Forward pass on a numpy batch."""
    with torch.no_grad():
        return net(torch.as_tensor(np.atleast_2d(x), dtype=DTYPE)).numpy()


@dataclass
class Standardizer:
    """Column scaling backed by a fitted `StandardScaler`; constant columns keep unit scale."""
    scaler: StandardScaler

    @classmethod
    def fit(cls, data: np.ndarray) -> "Standardizer":
        return cls(StandardScaler().fit(np.atleast_2d(data)))

    @classmethod
    def from_moments(cls, mean: np.ndarray, std: np.ndarray) -> "Standardizer":
        mean, std = np.asarray(mean, dtype=float), np.asarray(std, dtype=float)
        scaler = StandardScaler()
        scaler.mean_, scaler.scale_, scaler.var_ = mean, std, std ** 2
        scaler.n_features_in_, scaler.n_samples_seen_ = mean.shape[0], 0
        return cls(scaler)

    @property
    def mean(self) -> np.ndarray:
        return self.scaler.mean_

    @property
    def std(self) -> np.ndarray:
        return self.scaler.scale_

    def forward(self, data: np.ndarray) -> np.ndarray:
        return self.scaler.transform(np.atleast_2d(data))

    def inverse(self, data: np.ndarray) -> np.ndarray:
        return self.scaler.inverse_transform(np.atleast_2d(data))


def _make_optimizer(params, config: TrainingConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr)
    return torch.optim.Adam(params, lr=config.lr, betas=(0.9, 0.999))


def _check_loss(value: float, epoch: int, what: str) -> None:
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise TrainingError(f"{what} diverged at epoch {epoch}: loss={value:.4g}", epoch=epoch)


def _check_gradients(params, epoch: int) -> None:
    for p in params:
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient at epoch {epoch}", epoch=epoch)


def _batch_size(n: int, config: TrainingConfig) -> int:
    if config.batch_size:
        return min(config.batch_size, n)
    return n if n <= FULL_BATCH_LIMIT else DEFAULT_MINIBATCH


@dataclass
class RegressionModel:
    """Standardized MLP regression with physical-unit predict and jacobian."""
    net: MLP
    x_scaler: Standardizer
    y_scaler: Standardizer
    history: List[float] = field(default_factory=list)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.y_scaler.inverse(mlp_forward(self.net, self.x_scaler.forward(x)))

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        xs = torch.as_tensor(self.x_scaler.forward(x), dtype=DTYPE)
        jac = vmap(jacrev(self.net))(xs).detach().numpy()
        return jac * self.y_scaler.std[None, :, None] / self.x_scaler.std[None, None, :]


def mlp_train_regression(inputs: np.ndarray, targets: np.ndarray, config: Optional[TrainingConfig] = None,
                         seed: int = 0, stream: str = "mlp") -> RegressionModel:
    """
    Fit an MLP by minimizing the MSE of standardized targets.

    Args:
        inputs: (N, d_in) regressors
        targets: (N, d_out) or (N,) targets
        config: Architecture and optimizer settings
        seed, stream: Root seed and substream for initialization and batching

    Returns:
        RegressionModel: Trained network with its scalers and loss history
    """
    config = config or TrainingConfig()
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if inputs.shape[0] != targets.shape[0]:
        raise DimensionMismatchError(f"{inputs.shape[0]} inputs but {targets.shape[0]} targets")

    x_scaler, y_scaler = Standardizer.fit(inputs), Standardizer.fit(targets)
    x = torch.as_tensor(x_scaler.forward(inputs), dtype=DTYPE)
    y = torch.as_tensor(y_scaler.forward(targets), dtype=DTYPE)
    init = torch.Generator().manual_seed(derive_seed(seed, f"{stream}_init"))
    net = MLP(mlp_dims(x.shape[1], y.shape[1], config.hidden_units, config.hidden_layers), init)
    optimizer = _make_optimizer(net.parameters(), config)
    shuffle = torch.Generator().manual_seed(derive_seed(seed, f"{stream}_batches"))

    n = x.shape[0]
    batch = _batch_size(n, config)
    history: List[float] = []
    best, best_state, stale = math.inf, copy.deepcopy(net.state_dict()), 0
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(n, generator=shuffle) if batch < n else torch.arange(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            optimizer.zero_grad()
            loss = torch.mean((net(x[idx]) - y[idx]) ** 2)
            loss.backward()
            _check_gradients(net.parameters(), epoch)
            optimizer.step()
            total += loss.item() * idx.numel()
        total /= n
        _check_loss(total, epoch, "regression")
        history.append(total)
        if total < best:
            best, best_state, stale = total, copy.deepcopy(net.state_dict()), 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.debug(f"Regression plateau at epoch {epoch}")
                break
    net.load_state_dict(best_state)
    logger.info(f"MLP regression {x.shape[1]}->{y.shape[1]}: best standardized MSE {best:.3g} after {len(history)} epochs")
    return RegressionModel(net, x_scaler, y_scaler, history)


class ConformalAutoencoder(nn.Module):
    """
    Encoder NN1 (m -> m), decoder NN2 (m -> m) and behavior estimator NN3
    (d_eff -> n_obs) reading only the first d_eff latents. The parameter
    estimator NN4 is fitted after training.
    """

    def __init__(self, n_params: int, n_obs: int, d_eff: int, hidden_units: int = 20, hidden_layers: int = 4,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if not 1 <= d_eff <= n_params:
            raise InvalidInputError(f"d_eff must lie in [1, {n_params}], got {d_eff}")
        self.n_params = n_params
        self.n_obs = n_obs
        self.d_eff = d_eff
        self.encoder = MLP(mlp_dims(n_params, n_params, hidden_units, hidden_layers), generator)
        self.decoder = MLP(mlp_dims(n_params, n_params, hidden_units, hidden_layers), generator)
        self.behavior = MLP(mlp_dims(d_eff, n_obs, hidden_units, hidden_layers), generator)
        self.estimator: Optional[RegressionModel] = None
        self.x_scaler = Standardizer.from_moments(np.zeros(n_params), np.ones(n_params))
        self.y_scaler = Standardizer.from_moments(np.zeros(n_obs), np.ones(n_obs))
        self.log_inputs = False
        self.log_outputs = False
        self.history: List[Dict[str, float]] = []
        self.train_rows = np.zeros(0, dtype=int)
        self.test_rows = np.zeros(0, dtype=int)

    def standardize_inputs(self, params: np.ndarray) -> np.ndarray:
        params = np.atleast_2d(np.asarray(params, dtype=float))
        return self.x_scaler.forward(np.log10(params) if self.log_inputs else params)

    def standardize_outputs(self, outputs: np.ndarray) -> np.ndarray:
        outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
        return self.y_scaler.forward(np.log10(outputs) if self.log_outputs else outputs)

    def encode(self, params: np.ndarray) -> np.ndarray:
        return mlp_forward(self.encoder, self.standardize_inputs(params))

    def decode(self, latents: np.ndarray) -> np.ndarray:
        x = self.x_scaler.inverse(mlp_forward(self.decoder, latents))
        return 10.0 ** x if self.log_inputs else x

    def predict_behavior(self, latents: np.ndarray) -> np.ndarray:
        y = self.y_scaler.inverse(mlp_forward(self.behavior, np.atleast_2d(latents)[:, :self.d_eff]))
        return 10.0 ** y if self.log_outputs else y

    def estimate_latents(self, outputs: np.ndarray) -> np.ndarray:
        """NN4: meaningful latents from observation vectors."""
        if self.estimator is None:
            raise InvalidInputError("parameter estimator has not been trained")
        return self.estimator.predict(self.standardize_outputs(outputs))


def _latent_jacobian(encoder: MLP, x: torch.Tensor, mode: str) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Latents and their input Jacobians (B, m, m) kept in the autograd graph.

    The finite-difference mode replaces the inner derivative by central
    differences, so only first-order backpropagation is needed.
    """
    if mode == "finite_difference":
        nu = encoder(x)
        m = x.shape[1]
        eye = torch.eye(m, dtype=DTYPE) * FD_JACOBIAN_STEP
        cols = [(encoder(x + eye[j]) - encoder(x - eye[j])) / (2.0 * FD_JACOBIAN_STEP) for j in range(m)]
        return nu, torch.stack(cols, dim=2)
    x = x.detach().requires_grad_(True)
    nu = encoder(x)
    rows = [torch.autograd.grad(nu[:, i].sum(), x, create_graph=True)[0] for i in range(nu.shape[1])]
    return nu, torch.stack(rows, dim=1)


def orthogonality_penalty(jac: torch.Tensor) -> torch.Tensor:
    """Sum over latent pairs i<j of the batch mean of <J_i, J_j>^2."""
    gram = torch.einsum("bik,bjk->bij", jac, jac)
    i, j = torch.triu_indices(jac.shape[1], jac.shape[1], offset=1)
    if i.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    return torch.mean(gram[:, i, j] ** 2, dim=0).sum()


def reconstruction_step_loss(model: ConformalAutoencoder, x: torch.Tensor, alpha_ortho: float,
                             mode: str = "autograd") -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """L1 = reconstruction MSE + alpha * orthogonality; returns (L1, reconstruction, orthogonality)."""
    nu, jac = _latent_jacobian(model.encoder, x, mode)
    recon = torch.mean((model.decoder(nu) - x) ** 2)
    ortho = orthogonality_penalty(jac)
    return recon + alpha_ortho * ortho, recon, ortho


def behavior_step_loss(model: ConformalAutoencoder, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """L2 = MSE of NN3 on the first d_eff latents."""
    nu = model.encoder(x)
    return torch.mean((model.behavior(nu[:, :model.d_eff]) - y) ** 2)


def train_conformal_ae(dataset: Dataset, d_eff: int, config: Optional[TrainingConfig] = None, seed: int = 0,
                       log_inputs: bool = False, log_outputs: bool = False,
                       train_rows: Optional[Sequence[int]] = None) -> ConformalAutoencoder:
    """
    Train a conformal autoencoder with alternating steps.

    Every epoch first updates (NN1, NN2) on L1 = reconstruction +
    alpha * sum_{i<j} mean(<dnu_i, dnu_j>^2), then (NN1, NN3) on the
    behavior loss L2. Training stops at `epochs`, or after `patience`
    epochs without a new best total loss; the best weights are kept.

    Args:
        dataset: Parameter inputs and behavior outputs
        d_eff: Number of meaningful latents
        config: Training settings
        seed: Root seed; initialization, split and batches use named substreams
        log_inputs, log_outputs: Work with log10 values before standardizing
        train_rows: Training rows; a seeded split by `test_fraction` when omitted

    Returns:
        ConformalAutoencoder: Trained model with scalers, split and loss history
    """
    config = config or TrainingConfig()
    n, m = dataset.inputs.shape
    if train_rows is None:
        train_rows, test_rows = train_test_split(n, config.test_fraction, seed, "cae_split")
    else:
        train_rows = np.asarray(train_rows, dtype=int)
        test_rows = np.setdiff1d(np.arange(n), train_rows)

    init = torch.Generator().manual_seed(derive_seed(seed, "cae_init"))
    model = ConformalAutoencoder(m, dataset.outputs.shape[1], d_eff, config.hidden_units, config.hidden_layers, init)
    model.log_inputs, model.log_outputs = log_inputs, log_outputs
    raw_x = np.log10(dataset.inputs) if log_inputs else dataset.inputs
    raw_y = np.log10(dataset.outputs) if log_outputs else dataset.outputs
    model.x_scaler = Standardizer.fit(raw_x[train_rows])
    model.y_scaler = Standardizer.fit(raw_y[train_rows])
    model.train_rows, model.test_rows = np.asarray(train_rows), np.asarray(test_rows)

    x = torch.as_tensor(model.x_scaler.forward(raw_x[train_rows]), dtype=DTYPE)
    y = torch.as_tensor(model.y_scaler.forward(raw_y[train_rows]), dtype=DTYPE)
    params_a = list(model.encoder.parameters()) + list(model.decoder.parameters())
    params_b = list(model.encoder.parameters()) + list(model.behavior.parameters())
    opt_a, opt_b = _make_optimizer(params_a, config), _make_optimizer(params_b, config)
    shuffle = torch.Generator().manual_seed(derive_seed(seed, "cae_batches"))

    n_train = x.shape[0]
    batch = _batch_size(n_train, config)
    logger.info(f"Training CAE m={m}, d_eff={d_eff} on {n_train} rows: alpha={config.alpha_ortho}, "
                f"lr={config.lr}, batch={batch}, jacobian={config.jacobian_mode}")
    best, best_state, stale = math.inf, copy.deepcopy(model.state_dict()), 0
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(n_train, generator=shuffle) if batch < n_train else torch.arange(n_train)
        sums = np.zeros(3)
        for start in range(0, n_train, batch):
            idx = order[start:start + batch]
            xb, yb = x[idx], y[idx]

            opt_a.zero_grad()
            l1, recon, ortho = reconstruction_step_loss(model, xb, config.alpha_ortho, config.jacobian_mode)
            l1.backward()
            _check_gradients(params_a, epoch)
            opt_a.step()

            opt_b.zero_grad()
            l2 = behavior_step_loss(model, xb, yb)
            l2.backward()
            _check_gradients(params_b, epoch)
            opt_b.step()
            sums += idx.numel() * np.array([recon.item(), ortho.item(), l2.item()])

        recon_avg, ortho_avg, behavior_avg = sums / n_train
        total = recon_avg + config.alpha_ortho * ortho_avg + behavior_avg
        _check_loss(total, epoch, "conformal autoencoder")
        model.history.append({"epoch": epoch, "reconstruction": recon_avg, "orthogonality": ortho_avg,
                              "behavior": behavior_avg, "total": total})
        if epoch % _LOG_EVERY == 0:
            logger.debug(f"CAE epoch {epoch}: total={total:.4g} recon={recon_avg:.3g} "
                         f"ortho={ortho_avg:.3g} behavior={behavior_avg:.3g}")
        if total < best:
            best, best_state, stale = total, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"CAE loss plateaued for {config.patience} epochs; stopping at epoch {epoch}")
                break
    model.load_state_dict(best_state)
    logger.info(f"CAE trained: best total loss {best:.4g} after {len(model.history)} epochs")
    return model


def encoder_input_jacobian(model: ConformalAutoencoder, params: np.ndarray, standardized: bool = False) -> np.ndarray:
    """
    Exact Jacobian d nu_i / d p_j of the encoder.

    Args:
        model: Trained or untrained autoencoder
        params: (m,) or (N, m) parameter vectors
        standardized: Differentiate with respect to the standardized inputs

    Returns:
        np.ndarray: (m, m) or (N, m, m)
    """
    params = np.asarray(params, dtype=float)
    single = params.ndim == 1
    params = np.atleast_2d(params)
    xs = torch.as_tensor(model.standardize_inputs(params), dtype=DTYPE)
    jac = vmap(jacrev(model.encoder))(xs).detach().numpy()
    if not standardized:
        jac = jac / model.x_scaler.std[None, None, :]
        if model.log_inputs:
            jac = jac / (params * math.log(10.0))[:, None, :]
    return jac[0] if single else jac


def conformality_residual(model: ConformalAutoencoder, params: np.ndarray) -> Dict[Tuple[int, int], float]:
    """Mean squared inner product of encoder Jacobian rows per latent pair, in standardized inputs."""
    jac = encoder_input_jacobian(model, np.atleast_2d(params), standardized=True)
    gram = np.einsum("bik,bjk->bij", jac, jac)
    return {(i, j): float(np.mean(gram[:, i, j] ** 2))
            for i, j in itertools.combinations(range(model.n_params), 2)}


def jacobian_row_cosines(model: ConformalAutoencoder, params: np.ndarray, reference_row: int = 0) -> np.ndarray:
    """|cos| between one encoder-gradient row and every other row, per point: (N, m-1)."""
    jac = encoder_input_jacobian(model, np.atleast_2d(params), standardized=True)
    ref = jac[:, reference_row, :]
    others = np.delete(jac, reference_row, axis=1)
    num = np.abs(np.einsum("bk,bjk->bj", ref, others))
    den = np.linalg.norm(ref, axis=1)[:, None] * np.linalg.norm(others, axis=2)
    return num / np.maximum(den, 1e-300)


def redundant_grid(model: ConformalAutoencoder, latents: np.ndarray, n_per_axis: int = 20,
                   margin: float = 0.05) -> np.ndarray:
    """Regular grid over the redundant latents, inside their training range shrunk by `margin`."""
    latents = np.atleast_2d(latents)[:, model.d_eff:]
    if latents.shape[1] == 0:
        return np.zeros((1, 0))
    lo, hi = latents.min(axis=0), latents.max(axis=0)
    pad = margin * (hi - lo)
    axes = [np.linspace(a + p, b - p, n_per_axis) for a, b, p in zip(lo, hi, pad)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


@dataclass
class LevelSetTrace:
    params: np.ndarray
    valid: np.ndarray
    outputs: np.ndarray
    deviations: np.ndarray
    reference: np.ndarray

    def summary(self) -> Dict[str, Any]:
        ok = self.valid & np.isfinite(self.deviations)
        return {
            "n_points": int(self.valid.size),
            "n_valid": int(np.sum(ok)),
            "max_deviation": float(np.max(self.deviations[ok])) if ok.any() else float("nan"),
            "median_deviation": float(np.median(self.deviations[ok])) if ok.any() else float("nan"),
        }


def trace_level_set(model: ConformalAutoencoder, nu_meaningful: np.ndarray, grid: np.ndarray,
                    sim_model: Optional[ModelId] = None, observable: Optional[Observable] = None,
                    initial_state: Optional[np.ndarray] = None, reference: Optional[np.ndarray] = None,
                    **integrator) -> LevelSetTrace:
    """
    Decode fixed meaningful latents across a grid of redundant latents.

    Args:
        model: Trained autoencoder
        nu_meaningful: (d_eff,) fixed meaningful latents
        grid: (K, m - d_eff) redundant latent values
        sim_model: When given, every decoded point is re-simulated
        reference: Level-set behavior; NN3's prediction at `nu_meaningful` by default

    Returns:
        LevelSetTrace: Decoded parameters, validity mask and relative l2 deviations
    """
    nu_meaningful = np.ravel(nu_meaningful)
    grid = np.atleast_2d(grid)
    if nu_meaningful.size != model.d_eff or grid.shape[1] != model.n_params - model.d_eff:
        raise DimensionMismatchError(
            f"expected {model.d_eff} meaningful and {model.n_params - model.d_eff} redundant latents")
    latents = np.column_stack([np.repeat(nu_meaningful[None, :], grid.shape[0], axis=0), grid])
    params = model.decode(latents)
    valid = np.all(params > 0, axis=1) & np.all(np.isfinite(params), axis=1)
    if not valid.all():
        logger.warning(f"{int(np.sum(~valid))} of {valid.size} decoded level-set points are nonpositive; masked")
    if reference is None:
        reference = model.predict_behavior(nu_meaningful[None, :])[0]
    reference = np.ravel(reference)

    outputs = np.full((grid.shape[0], reference.size), np.nan)
    deviations = np.full(grid.shape[0], np.nan)
    if sim_model is not None and valid.any():
        simulated, failed = forward_observations(sim_model, params[valid], initial_state, observable, **integrator)
        outputs[valid] = simulated
        deviations = np.linalg.norm(outputs - reference[None, :], axis=1) / max(np.linalg.norm(reference), 1e-300)
        if failed:
            logger.warning(f"{len(failed)} level-set simulations failed")
    return LevelSetTrace(params, valid, outputs, deviations, reference)


def train_parameter_estimator(model: ConformalAutoencoder, dataset: Dataset,
                              config: Optional[TrainingConfig] = None, seed: int = 0) -> RegressionModel:
    """Fit NN4 (observations -> meaningful latents) on the training rows after the main loop."""
    rows = model.train_rows
    latents = model.encode(dataset.inputs[rows])[:, :model.d_eff]
    model.estimator = mlp_train_regression(model.standardize_outputs(dataset.outputs[rows]), latents,
                                           config, seed, "cae_nn4")
    return model.estimator


def r2_score(truth: np.ndarray, predicted: np.ndarray) -> float:
    """Coefficient of determination pooled over standardized output columns."""
    truth = np.asarray(truth, dtype=float).reshape(len(truth), -1)
    predicted = np.asarray(predicted, dtype=float).reshape(truth.shape)
    scale = truth.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    resid = np.sum(((truth - predicted) / scale) ** 2)
    total = np.sum(((truth - truth.mean(axis=0)) / scale) ** 2)
    return float(1.0 - resid / max(total, 1e-300))


def disentanglement_scores(model: ConformalAutoencoder, dataset: Dataset,
                           config: Optional[TrainingConfig] = None, seed: int = 0) -> Dict[str, float]:
    """
    Test-split R^2 of behavior regressed on meaningful latents alone and on
    redundant latents alone.
    """
    latents = model.encode(dataset.inputs)
    behavior = model.standardize_outputs(dataset.outputs)
    train, test = model.train_rows, model.test_rows
    if test.size == 0:
        raise InvalidInputError("model has no held-out rows to score")
    scores = {}
    for name, cols in (("meaningful_r2", slice(0, model.d_eff)), ("redundant_r2", slice(model.d_eff, None))):
        block = latents[:, cols]
        if block.shape[1] == 0:
            scores[name] = float("nan")
            continue
        reg = mlp_train_regression(block[train], behavior[train], config, seed, f"disentangle_{name}")
        scores[name] = r2_score(behavior[test], reg.predict(block[test]))
    logger.info(f"Disentanglement: meaningful R2={scores['meaningful_r2']:.3f}, "
                f"redundant R2={scores['redundant_r2']:.3f}")
    return scores


def model_state_arrays(model: ConformalAutoencoder) -> Dict[str, np.ndarray]:
    """Every weight matrix and scaler vector as float64 arrays, for persistence."""
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    arrays.update({
        "x_mean": model.x_scaler.mean, "x_std": model.x_scaler.std,
        "y_mean": model.y_scaler.mean, "y_std": model.y_scaler.std,
    })
    return arrays


def load_model_state(arrays: Dict[str, np.ndarray], meta: Dict[str, Any]) -> ConformalAutoencoder:
    """Rebuild an autoencoder from `model_state_arrays` output and its metadata."""
    model = ConformalAutoencoder(meta["n_params"], meta["n_obs"], meta["d_eff"],
                                 meta["hidden_units"], meta["hidden_layers"])
    state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items()
             if k not in ("x_mean", "x_std", "y_mean", "y_std")}
    model.load_state_dict(state)
    model.x_scaler = Standardizer.from_moments(arrays["x_mean"], arrays["x_std"])
    model.y_scaler = Standardizer.from_moments(arrays["y_mean"], arrays["y_std"])
    model.log_inputs = bool(meta.get("log_inputs", False))
    model.log_outputs = bool(meta.get("log_outputs", False))
    return model


def model_meta(model: ConformalAutoencoder, config: TrainingConfig) -> Dict[str, Any]:
    return {
        "n_params": model.n_params,
        "n_obs": model.n_obs,
        "d_eff": model.d_eff,
        "hidden_units": config.hidden_units,
        "hidden_layers": config.hidden_layers,
        "log_inputs": model.log_inputs,
        "log_outputs": model.log_outputs,
        "epochs_run": len(model.history),
    }
