"""
Comparison set aggregators trained with a squared-error loss:

- deepset: theta_hat = g(mean_i f(d_i))
- softmax: theta_hat = g(sum_i w_i f(d_i)), w = softmax(beta * f) taken per
  embedding component over the set, beta a learned scalar.

Both regress standardised targets; theta_shift/theta_scale map the global
net's output back to parameter space.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from models.set_dataset import SetDataset
from services.common import canonical_rows, segment_offsets
from services.errors import ConfigurationError, EmptyAggregationError, ShapeError
from services.nn_service import (
    DenseNet,
    ParamDict,
    TrainingHistory,
    backward,
    build_net,
    fit_parameters,
    forward,
    forward_with_cache,
    gradients_to_dict,
    net_parameters,
)

logger = logging.getLogger(__name__)

AGGREGATIONS = ("mean", "softmax")


@dataclass
class DeepsetModel:
    embed_net: DenseNet
    global_net: DenseNet
    aggregation: str
    beta: np.ndarray
    theta_shift: np.ndarray
    theta_scale: np.ndarray
    input_shift: np.ndarray
    input_scale: np.ndarray

    def __post_init__(self) -> None:
        if self.aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"Unknown set aggregation '{self.aggregation}'")
        if self.global_net.input_dim != self.embed_net.output_dim:
            raise ShapeError("global net input must equal the embedding dimension")
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(1)
        n_out = self.global_net.output_dim
        self.theta_shift = np.asarray(self.theta_shift, dtype=np.float64).reshape(n_out)
        self.theta_scale = np.asarray(self.theta_scale, dtype=np.float64).reshape(n_out)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64).reshape(self.input_dim)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64).reshape(self.input_dim)

    @property
    def input_dim(self) -> int:
        return self.embed_net.input_dim

    @property
    def n_p(self) -> int:
        return self.global_net.output_dim

    @property
    def kind(self) -> str:
        return "deepset" if self.aggregation == "mean" else "softmax"

    @property
    def n_params(self) -> int:
        extra = 1 if self.aggregation == "softmax" else 0
        return self.embed_net.n_params + self.global_net.n_params + extra

    def parameters(self) -> ParamDict:
        params = net_parameters(self.embed_net, "embed")
        params.update(net_parameters(self.global_net, "global"))
        if self.aggregation == "softmax":
            params["beta"] = self.beta
        return params


def build_deepset_model(
    input_dim: int,
    n_p: int,
    embed_hidden: Sequence[int],
    embed_dim: int,
    global_hidden: Sequence[int],
    activation_tag: str,
    aggregation: str,
    seed: int,
    beta_init: float = 1.0,
) -> DeepsetModel:
    embed_seed, global_seed = np.random.SeedSequence(seed).generate_state(2)
    return DeepsetModel(
        embed_net=build_net(input_dim, embed_hidden, embed_dim, activation_tag, int(embed_seed)),
        global_net=build_net(embed_dim, global_hidden, n_p, activation_tag, int(global_seed)),
        aggregation=aggregation,
        beta=np.array([beta_init]),
        theta_shift=np.zeros(n_p),
        theta_scale=np.ones(n_p),
        input_shift=np.zeros(input_dim),
        input_scale=np.ones(input_dim),
    )


def fit_theta_scaling(sets: Sequence[SetDataset]) -> Tuple[np.ndarray, np.ndarray]:
    thetas = np.stack([s.theta for s in sets])
    scale = thetas.std(axis=0)
    scale[scale == 0] = 1.0
    return thetas.mean(axis=0), scale


def softmax_aggregate(embeddings: np.ndarray, beta: float) -> np.ndarray:
    """Component-wise softmax(beta * f)-weighted sum over the rows of `embeddings`."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim == 1:
        embeddings = embeddings[:, None]
    if embeddings.shape[0] == 0:
        raise EmptyAggregationError("Cannot aggregate an empty set of embeddings.")
    out, _ = segment_softmax(embeddings, np.array([embeddings.shape[0]]), float(beta))
    return out[0]


def segment_softmax(
    embeddings: np.ndarray, lengths: np.ndarray, beta: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Softmax aggregation over contiguous segments of rows. Returns the
    (n_segments, dim) aggregates and the (rows, dim) weights. The per-segment
    max is subtracted before exponentiation.
    """
    offsets = segment_offsets(lengths)
    seg = np.repeat(np.arange(len(lengths)), lengths)
    logits = beta * embeddings
    peak = np.maximum.reduceat(logits, offsets, axis=0)
    weights = np.exp(logits - peak[seg])
    weights = weights / np.add.reduceat(weights, offsets, axis=0)[seg]
    return np.add.reduceat(weights * embeddings, offsets, axis=0), weights


def segment_softmax_backward(
    embeddings: np.ndarray,
    lengths: np.ndarray,
    beta: float,
    aggregates: np.ndarray,
    weights: np.ndarray,
    grad_out: np.ndarray,
) -> Tuple[np.ndarray, float]:
    """
    Given dLoss/da per segment, return dLoss/df per row and dLoss/dbeta:
    da_k/df_jk = w_jk (1 + beta (f_jk - a_k)), da_k/dbeta = sum_i w_ik f_ik (f_ik - a_k).
    """
    seg = np.repeat(np.arange(len(lengths)), lengths)
    g = grad_out[seg]
    centred = embeddings - aggregates[seg]
    grad_f = g * weights * (1.0 + beta * centred)
    grad_beta = float(np.sum(g * weights * embeddings * centred))
    return grad_f, grad_beta


def _aggregate(model: DeepsetModel, f: np.ndarray, lengths: np.ndarray):
    if model.aggregation == "mean":
        return np.add.reduceat(f, segment_offsets(lengths), axis=0) / lengths[:, None], None
    return segment_softmax(f, lengths, float(model.beta[0]))


def _prepare(model: DeepsetModel, blocks: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([b.shape[0] for b in blocks], dtype=np.int64)
    if np.any(lengths == 0):
        raise EmptyAggregationError("Every set must contain at least one datum.")
    rows = np.concatenate(blocks, axis=0)
    if rows.shape[1] != model.input_dim:
        raise ShapeError(f"Sets have {rows.shape[1]} features, model expects {model.input_dim}")
    return (rows - model.input_shift) / model.input_scale, lengths


def predict_blocks(model: DeepsetModel, blocks: Sequence[np.ndarray]) -> np.ndarray:
    x, lengths = _prepare(model, blocks)
    agg, _ = _aggregate(model, forward(model.embed_net, x), lengths)
    return model.theta_shift + model.theta_scale * forward(model.global_net, agg)


def deepset_forward(model: DeepsetModel, data: np.ndarray) -> np.ndarray:
    """theta_hat for one set; rows are reduced in canonical order."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyAggregationError("Cannot evaluate a deepset on an empty set.")
    return predict_blocks(model, [canonical_rows(data)])[0]


def predict_sets(model: DeepsetModel, sets: Sequence[SetDataset]) -> np.ndarray:
    blocks = [canonical_rows(s.data) for s in sets]
    out = []
    for lo in range(0, len(blocks), 256):
        out.append(predict_blocks(model, blocks[lo:lo + 256]))
    return np.concatenate(out)


def mse_loss(theta_hat: np.ndarray, theta: np.ndarray) -> float:
    """Mean over sets and parameters of the squared error."""
    return float(np.mean((np.asarray(theta_hat) - np.asarray(theta)) ** 2))


def loss_and_gradients(
    model: DeepsetModel, blocks: Sequence[np.ndarray], thetas: np.ndarray
) -> Tuple[float, ParamDict]:
    x, lengths = _prepare(model, blocks)
    f, embed_cache = forward_with_cache(model.embed_net, x)
    agg, weights = _aggregate(model, f, lengths)
    z, global_cache = forward_with_cache(model.global_net, agg)
    theta_hat = model.theta_shift + model.theta_scale * z
    residual = theta_hat - thetas
    loss = float(np.mean(residual ** 2))

    grad_z = 2.0 * residual * model.theta_scale / residual.size
    global_grads = backward(model.global_net, agg, grad_z, global_cache)
    grads = gradients_to_dict(global_grads, "global")
    if model.aggregation == "mean":
        seg = np.repeat(np.arange(len(lengths)), lengths)
        grad_f = (global_grads.input / lengths[:, None])[seg]
    else:
        grad_f, grad_beta = segment_softmax_backward(
            f, lengths, float(model.beta[0]), agg, weights, global_grads.input
        )
        grads["beta"] = np.array([grad_beta])
    grads.update(gradients_to_dict(backward(model.embed_net, x, grad_f, embed_cache), "embed"))
    return loss, grads


def evaluate_mse(model: DeepsetModel, sets: Sequence[SetDataset]) -> float:
    return mse_loss(predict_sets(model, sets), np.stack([s.theta for s in sets]))


def mse_train(
    model: DeepsetModel,
    train_sets: Sequence[SetDataset],
    config,
    valid_sets: Optional[Sequence[SetDataset]] = None,
) -> Tuple[DeepsetModel, TrainingHistory]:
    if not train_sets:
        raise EmptyAggregationError("Training requires at least one dataset.")
    blocks = [canonical_rows(s.data) for s in train_sets]
    thetas = np.stack([s.theta for s in train_sets])
    if thetas.shape[1] != model.n_p:
        raise ShapeError(f"Datasets carry {thetas.shape[1]} parameters, model predicts {model.n_p}")

    def batch_loss(idx: np.ndarray) -> Tuple[float, ParamDict]:
        return loss_and_gradients(model, [blocks[i] for i in idx], thetas[idx])

    history = fit_parameters(
        model.parameters(),
        batch_loss,
        len(blocks),
        config,
        evaluate=(lambda: evaluate_mse(model, valid_sets)) if valid_sets else None,
        desc=model.kind,
        owner=model,
    )
    return model, history
