"""
Dense feedforward network engine.

- DenseNet holds layer sizes, per-hidden-layer activation tags and the
  weight/bias arrays; the output layer is always linear.
- forward/backward work on a single vector or a 2-D batch of rows and give
  exact analytic gradients (no autodiff).
- Adam with bias correction and a step learning-rate decay helper.

Everything is float64. Parameters are exposed as name -> array dicts whose
arrays are the live storage of the net, so the optimizer updates in place.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from services.errors import (
    ConfigurationError,
    FactorizationError,
    IllConditionedFisherError,
    ShapeError,
    TrainingDivergenceError,
)

logger = logging.getLogger(__name__)

ACTIVATIONS = ("elu", "swish", "identity")

ParamDict = Dict[str, np.ndarray]


@dataclass
class DenseNet:
    """Feedforward network; weights[k] has shape (layer_sizes[k], layer_sizes[k+1])."""

    layer_sizes: List[int]
    activations: List[str]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    seed: Optional[int] = None

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights) + sum(b.size for b in self.biases))


@dataclass
class NetGradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    input: np.ndarray


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: ParamDict = field(default_factory=dict)
    second_moment: ParamDict = field(default_factory=dict)


def _check_tag(tag: str) -> None:
    if tag not in ACTIVATIONS:
        raise ConfigurationError(
            f"Unknown activation '{tag}'. Choose one of {', '.join(ACTIVATIONS)}."
        )


def activation(tag: str, z: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    elu(z) = z for z >= 0, e^z - 1 otherwise; swish(z) = z * sigmoid(z).
    """
    _check_tag(tag)
    z = np.asarray(z, dtype=np.float64)
    if tag == "elu":
        out = np.where(z >= 0, z, np.expm1(np.minimum(z, 0.0)))
    elif tag == "swish":
        out = z * expit(z)
    else:
        out = z
    return out if out.ndim else float(out)


def activation_grad(tag: str, z: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    _check_tag(tag)
    z = np.asarray(z, dtype=np.float64)
    if tag == "elu":
        out = np.where(z >= 0, 1.0, np.exp(np.minimum(z, 0.0)))
    elif tag == "swish":
        s = expit(z)
        out = s + z * s * (1.0 - s)
    else:
        out = np.ones_like(z)
    return out if out.ndim else float(out)


def _activation_grad_cached(tag: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """activation_grad reusing the cached output a = activation(z)."""
    if tag == "elu":
        return np.where(z >= 0, 1.0, a + 1.0)
    if tag == "swish":
        s = expit(z)
        return s + a * (1.0 - s)
    return np.ones_like(z)


def validate_net(net: DenseNet) -> None:
    sizes = net.layer_sizes
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ConfigurationError(f"layer_sizes must hold at least two positive integers, got {sizes}")
    if len(net.activations) != len(sizes) - 2:
        raise ConfigurationError(
            f"Expected {len(sizes) - 2} hidden activations for layer_sizes {sizes}, "
            f"got {len(net.activations)}"
        )
    for tag in net.activations:
        _check_tag(tag)
    if len(net.weights) != len(sizes) - 1 or len(net.biases) != len(sizes) - 1:
        raise ShapeError("weights/biases count does not match layer_sizes")
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
            raise ShapeError(
                f"Layer {k}: weight {w.shape} / bias {b.shape} inconsistent with "
                f"{sizes[k]} -> {sizes[k + 1]}"
            )


def init_dense_net(
    layer_sizes: Sequence[int],
    activations: Union[str, Sequence[str]],
    seed: int,
) -> DenseNet:
    """
    Fan-in scaled uniform initialisation, W ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)),
    zero biases. A single activation tag is broadcast to every hidden layer.
    """
    sizes = [int(s) for s in layer_sizes]
    n_hidden = len(sizes) - 2
    if isinstance(activations, str):
        tags = [activations] * max(n_hidden, 0)
    else:
        tags = list(activations)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    net = DenseNet(layer_sizes=sizes, activations=tags, weights=weights, biases=biases, seed=int(seed))
    validate_net(net)
    return net


def build_net(
    input_dim: int,
    hidden: Sequence[int],
    output_dim: int,
    activation_tag: str,
    seed: int,
) -> DenseNet:
    return init_dense_net([input_dim, *hidden, output_dim], activation_tag, seed)


def clone_net(net: DenseNet) -> DenseNet:
    return copy.deepcopy(net)


def _as_batch(net: DenseNet, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(
            f"Input dimension mismatch: net expects {net.input_dim}, got shape {x.shape}"
        )
    return batch, single


def forward_with_cache(net: DenseNet, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Forward pass keeping the layer inputs and pre-activations for backward.
    cache = [a_0, z_1, a_1, ..., z_L] with a_0 the (batched) input.
    """
    a, _ = _as_batch(net, x)
    cache = [a]
    n_layers = len(net.weights)
    for k in range(n_layers):
        z = a @ net.weights[k] + net.biases[k]
        cache.append(z)
        if k < n_layers - 1:
            a = activation(net.activations[k], z)
            cache.append(a)
        else:
            a = z
    return a, cache


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Network output for one input vector or a (rows, input_dim) batch."""
    out, _ = forward_with_cache(net, x)
    return out[0] if np.asarray(x).ndim == 1 else out


def backward(
    net: DenseNet,
    x: np.ndarray,
    upstream_grad: np.ndarray,
    cache: Optional[List[np.ndarray]] = None,
) -> NetGradients:
    """
    Gradients of a scalar loss given dLoss/dOutput (`upstream_grad`, same
    shape as the output). Batch contributions are summed over rows.
    """
    batch, single = _as_batch(net, x)
    if cache is None:
        _, cache = forward_with_cache(net, batch)
    delta = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        delta = delta[None, :]
    if delta.shape != (batch.shape[0], net.output_dim):
        raise ShapeError(
            f"Upstream gradient shape {delta.shape} does not match output "
            f"({batch.shape[0]}, {net.output_dim})"
        )

    n_layers = len(net.weights)
    grad_w: List[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    grad_b: List[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        a_prev = cache[2 * k]
        grad_w[k] = a_prev.T @ delta
        grad_b[k] = delta.sum(axis=0)
        delta = delta @ net.weights[k].T
        if k > 0:
            delta = delta * _activation_grad_cached(net.activations[k - 1], cache[2 * k - 1], cache[2 * k])
    grad_in = delta[0] if single else delta
    return NetGradients(weights=grad_w, biases=grad_b, input=grad_in)


def net_parameters(net: DenseNet, prefix: str) -> ParamDict:
    params: ParamDict = {}
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        params[f"{prefix}.w{k}"] = w
        params[f"{prefix}.b{k}"] = b
    return params


def gradients_to_dict(grads: NetGradients, prefix: str) -> ParamDict:
    out: ParamDict = {}
    for k, (w, b) in enumerate(zip(grads.weights, grads.biases)):
        out[f"{prefix}.w{k}"] = w
        out[f"{prefix}.b{k}"] = b
    return out


def count_parameters(params: ParamDict) -> int:
    return int(sum(p.size for p in params.values()))


def snapshot(params: ParamDict) -> ParamDict:
    return {k: v.copy() for k, v in params.items()}


def restore(params: ParamDict, saved: ParamDict) -> None:
    for k, v in saved.items():
        params[k][...] = v


def init_adam(
    params: ParamDict,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    if min(learning_rate, beta1, beta2, epsilon) <= 0:
        raise ConfigurationError("Adam hyperparameters must be positive.")
    return AdamState(
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
        step_count=0,
        first_moment={k: np.zeros_like(v) for k, v in params.items()},
        second_moment={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(params: ParamDict, grads: ParamDict, state: AdamState) -> Tuple[ParamDict, AdamState]:
    """
    One bias-corrected Adam update, applied in place to `params`.
    Parameters are visited in sorted-name order.
    """
    for name in sorted(params):
        g = grads.get(name)
        if g is None or g.shape != params[name].shape:
            raise ShapeError(f"Missing or mis-shaped gradient for '{name}'")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(
                f"Non-finite gradient for '{name}' at step {state.step_count + 1}",
                epoch=state.step_count,
            )

    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for name in sorted(params):
        g = grads[name]
        m = state.first_moment.setdefault(name, np.zeros_like(params[name]))
        v = state.second_moment.setdefault(name, np.zeros_like(params[name]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def clip_by_global_norm(grads: ParamDict, max_norm: Optional[float]) -> Tuple[ParamDict, float]:
    """Rescale every gradient by min(1, max_norm / ||g||) over the concatenated gradient."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def step_decay_lr(base_lr: float, epoch: int, milestones: Sequence[int], factor: float = 0.5) -> float:
    """Learning rate after halving (by default) at every milestone <= epoch."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * factor ** passed


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    valid_loss: List[float] = field(default_factory=list)
    learning_rate: List[float] = field(default_factory=list)
    best_epoch: int = 0


def fit_parameters(
    params: ParamDict,
    batch_loss: Callable[[np.ndarray], Tuple[float, ParamDict]],
    n_items: int,
    config,
    evaluate: Optional[Callable[[], float]] = None,
    desc: str = "train",
    owner: Optional[object] = None,
) -> TrainingHistory:
    """
    Shared minibatch loop for set models.

    Each epoch shuffles the `n_items` training sets with the config seed,
    calls `batch_loss(indices)` for every batch of `config.batch_size` sets
    and applies one Adam step, after clipping the global gradient norm to
    `config.clip_norm` when that is set. `evaluate()` returns the validation
    loss; valid_loss[0] is recorded before the first update. On a non-finite
    loss or gradient, a failed factorization or an ill-conditioned Fisher the
    parameters are rolled back to the end of the last finite epoch and
    TrainingDivergenceError is raised with `owner` attached.
    """
    history = TrainingHistory()
    if evaluate is not None:
        history.valid_loss.append(evaluate())
    if config.epochs == 0:
        return history

    adam = init_adam(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    last_finite = snapshot(params)
    best_loss, best_params, best_epoch = np.inf, snapshot(params), 0

    for epoch in tqdm(range(1, config.epochs + 1), desc=desc, disable=not config.progress):
        adam.learning_rate = step_decay_lr(
            config.learning_rate, epoch - 1, config.decay_milestones, config.decay_factor
        )
        order = rng.permutation(n_items)
        losses, clipped = [], 0
        try:
            for lo in range(0, n_items, config.batch_size):
                loss, grads = batch_loss(order[lo:lo + config.batch_size])
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(f"Non-finite loss at epoch {epoch}", epoch=epoch)
                grads, norm = clip_by_global_norm(grads, config.clip_norm)
                clipped += int(config.clip_norm is not None and norm > config.clip_norm)
                adam_step(params, grads, adam)
                losses.append(loss)
            valid_loss = evaluate() if evaluate is not None else None
        except (TrainingDivergenceError, FactorizationError, IllConditionedFisherError) as exc:
            restore(params, last_finite)
            logger.error("%s diverged at epoch %d; restored last finite parameters", desc, epoch)
            raise TrainingDivergenceError(str(exc), epoch=epoch, model=owner) from exc

        last_finite = snapshot(params)
        history.train_loss.append(float(np.mean(losses)))
        history.learning_rate.append(adam.learning_rate)
        if clipped:
            logger.debug("%s epoch %d: clipped %d of %d batches", desc, epoch, clipped, len(losses))
        if valid_loss is not None:
            history.valid_loss.append(valid_loss)
            if valid_loss < best_loss:
                best_loss, best_params, best_epoch = valid_loss, snapshot(params), epoch
        if epoch % config.log_every == 0 or epoch == config.epochs:
            logger.info(
                "%s epoch %d/%d train_loss=%.5f valid_loss=%s lr=%.2e",
                desc, epoch, config.epochs, history.train_loss[-1],
                f"{history.valid_loss[-1]:.5f}" if evaluate is not None else "-",
                adam.learning_rate,
            )

    history.best_epoch = config.epochs
    if evaluate is not None and config.restore_best and np.isfinite(best_loss):
        restore(params, best_params)
        history.best_epoch = best_epoch
        logger.info("%s: restored parameters from best validation epoch %d", desc, best_epoch)
    return history
