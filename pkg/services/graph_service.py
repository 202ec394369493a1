"""
Message-passing node classifier with pluggable neighbourhood aggregation.

A layer computes, for every edge u -> v,

    m_uv = message_net([h_u, e_uv])

aggregates the messages arriving at v with one of

    mean      sum(m) / deg(v)
    softmax   component-wise softmax(beta * m)-weighted sum, beta learned
    fishnets  a linear map splits m into a score t (n_p) and raw Cholesky
              entries; the output is (sum F)^-1 (sum t)

and updates h_v <- h_v + update_net([h_v, agg_v]). Isolated nodes aggregate
to the zero vector. A linear encoder maps node features to the hidden width
and a linear readout gives one logit per task. Gradients are exact.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from models.graph import Graph
from services.errors import (
    ConfigurationError,
    FactorizationError,
    ShapeError,
    TrainingDivergenceError,
    UndefinedMetricError,
)
from services.fishnets_service import (
    aggregate,
    cho_factor_batch,
    cho_solve_batch,
    cholesky_from_raw,
    cholesky_from_raw_batch,
    mle_estimate,
    n_tri,
    raw_grad_from_chol_grad,
)
from services.baseline_service import softmax_aggregate
from services.metrics_service import mean_roc_auc
from services.nn_service import (
    DenseNet,
    ParamDict,
    adam_step,
    backward,
    build_net,
    forward_with_cache,
    gradients_to_dict,
    init_adam,
    net_parameters,
    restore,
    snapshot,
)

logger = logging.getLogger(__name__)

GRAPH_AGGREGATIONS = ("mean", "softmax", "fishnets")


@dataclass
class GnnLayer:
    message_net: DenseNet
    update_net: DenseNet
    aggregation: str
    residual: bool = True
    pre_map: Optional[DenseNet] = None
    n_p: int = 0
    beta: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self) -> None:
        if self.aggregation not in GRAPH_AGGREGATIONS:
            raise ConfigurationError(f"Unknown neighbourhood aggregation '{self.aggregation}'")
        if self.aggregation == "fishnets":
            if self.pre_map is None or self.pre_map.output_dim != self.n_p + n_tri(self.n_p):
                raise ShapeError("fishnets layers need a pre-map with n_p + n_p(n_p+1)/2 outputs")
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(1)
        if self.update_net.input_dim != self.hidden_dim + self.agg_dim:
            raise ShapeError("update_net input must be hidden width + aggregation width")

    @property
    def hidden_dim(self) -> int:
        return self.update_net.output_dim

    @property
    def agg_dim(self) -> int:
        return self.n_p if self.aggregation == "fishnets" else self.message_net.output_dim

    @property
    def n_params(self) -> int:
        return count_layer_params(self.parameters(""))

    def parameters(self, prefix: str) -> ParamDict:
        params = net_parameters(self.message_net, f"{prefix}message")
        params.update(net_parameters(self.update_net, f"{prefix}update"))
        if self.pre_map is not None:
            params.update(net_parameters(self.pre_map, f"{prefix}premap"))
        if self.aggregation == "softmax":
            params[f"{prefix}beta"] = self.beta
        return params


@dataclass
class GnnModel:
    encoder: DenseNet
    layers: List[GnnLayer]
    readout: DenseNet
    node_shift: np.ndarray
    node_scale: np.ndarray
    aggregation: str = "mean"

    def __post_init__(self) -> None:
        d = self.encoder.input_dim
        self.node_shift = np.asarray(self.node_shift, dtype=np.float64).reshape(d)
        self.node_scale = np.asarray(self.node_scale, dtype=np.float64).reshape(d)

    @property
    def n_tasks(self) -> int:
        return self.readout.output_dim

    @property
    def n_params(self) -> int:
        return count_layer_params(self.parameters())

    def parameters(self) -> ParamDict:
        params = net_parameters(self.encoder, "encoder")
        for k, layer in enumerate(self.layers):
            params.update(layer.parameters(f"layer{k}."))
        params.update(net_parameters(self.readout, "readout"))
        return params


@dataclass
class GraphHistory:
    train_loss: List[float] = field(default_factory=list)
    valid_metric: List[float] = field(default_factory=list)
    test_metric: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_test_metric(self) -> float:
        return self.test_metric[self.best_epoch - 1]

    @property
    def best_valid_metric(self) -> float:
        return self.valid_metric[self.best_epoch - 1]

    def final_window_std(self, window: int = 10) -> float:
        return float(np.std(self.test_metric[-window:]))


def count_layer_params(params: ParamDict) -> int:
    return int(sum(p.size for p in params.values()))


def _dense_count(sizes: Sequence[int]) -> int:
    return int(sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:])))


def _layer_sizes(aggregation: str, hidden: int, width: int, d_edge: int, n_p: int) -> Dict[str, List[int]]:
    agg_dim = n_p if aggregation == "fishnets" else width
    sizes = {
        "message": [hidden + d_edge, width, width],
        "update": [hidden + agg_dim, width, hidden],
    }
    if aggregation == "fishnets":
        sizes["premap"] = [width, n_p + n_tri(n_p)]
    return sizes


def count_gnn_params(
    aggregation: str, d_node: int, d_edge: int, hidden: int, width: int, n_layers: int, n_tasks: int, n_p: int = 0
) -> int:
    per_layer = sum(_dense_count(s) for s in _layer_sizes(aggregation, hidden, width, d_edge, n_p).values())
    per_layer += 1 if aggregation == "softmax" else 0
    return _dense_count([d_node, hidden]) + n_layers * per_layer + _dense_count([hidden, n_tasks])


def match_width(
    aggregation: str,
    target_params: int,
    d_node: int,
    d_edge: int,
    hidden: int,
    n_layers: int,
    n_tasks: int,
    n_p: int = 0,
    max_width: int = 1024,
) -> int:
    """Layer width whose parameter count is closest to `target_params`."""
    counts = [
        abs(count_gnn_params(aggregation, d_node, d_edge, hidden, w, n_layers, n_tasks, n_p) - target_params)
        for w in range(1, max_width + 1)
    ]
    return int(np.argmin(counts)) + 1


def build_gnn_model(
    aggregation: str,
    d_node: int,
    d_edge: int,
    hidden: int,
    width: int,
    n_layers: int,
    n_tasks: int,
    n_p: int = 0,
    activation_tag: str = "swish",
    seed: int = 0,
    residual: bool = True,
) -> GnnModel:
    if aggregation == "fishnets" and n_p < 1:
        raise ConfigurationError("fishnets aggregation needs n_p >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(2 + 3 * n_layers)
    layers = []
    for k in range(n_layers):
        sizes = _layer_sizes(aggregation, hidden, width, d_edge, n_p)
        s_msg, s_upd, s_pre = (int(s) for s in seeds[2 + 3 * k: 5 + 3 * k])
        layers.append(
            GnnLayer(
                message_net=build_net(sizes["message"][0], sizes["message"][1:-1], sizes["message"][-1], activation_tag, s_msg),
                update_net=build_net(sizes["update"][0], sizes["update"][1:-1], sizes["update"][-1], activation_tag, s_upd),
                aggregation=aggregation,
                residual=residual,
                pre_map=build_net(width, [], n_p + n_tri(n_p), activation_tag, s_pre) if "premap" in sizes else None,
                n_p=n_p if aggregation == "fishnets" else 0,
            )
        )
    return GnnModel(
        encoder=build_net(d_node, [], hidden, activation_tag, int(seeds[0])),
        layers=layers,
        readout=build_net(hidden, [], n_tasks, activation_tag, int(seeds[1])),
        node_shift=np.zeros(d_node),
        node_scale=np.ones(d_node),
        aggregation=aggregation,
    )


def fit_node_scaling(graph: Graph) -> Tuple[np.ndarray, np.ndarray]:
    scale = graph.node_features.std(axis=0)
    scale[scale == 0] = 1.0
    return graph.node_features.mean(axis=0), scale


# --- single-neighbourhood aggregations ---------------------------------------


def fishnets_neighborhood_agg(scores: np.ndarray, raw: np.ndarray, n_p: int) -> np.ndarray:
    """(sum F_e)^-1 (sum t_e) over the messages of one neighbourhood; zeros if empty."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1, n_p)
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, n_tri(n_p))
    if scores.shape[0] != raw.shape[0]:
        raise ShapeError("scores and raw Cholesky entries must have one row per message")
    if scores.shape[0] == 0:
        return np.zeros(n_p)
    t_sum, f_sum = aggregate([(t, cholesky_from_raw(r, n_p)) for t, r in zip(scores, raw)])
    return mle_estimate(t_sum, f_sum)


def softmax_neighborhood_agg(messages: np.ndarray, beta: float) -> np.ndarray:
    messages = np.asarray(messages, dtype=np.float64)
    if messages.ndim == 1:
        messages = messages[:, None]
    if messages.shape[0] == 0:
        return np.zeros(messages.shape[1])
    return softmax_aggregate(messages, beta)


# --- batched layer ------------------------------------------------------------


@dataclass
class _LayerCache:
    h: np.ndarray
    msg_in: np.ndarray
    msg: np.ndarray
    msg_cache: list
    agg: np.ndarray
    upd_in: np.ndarray
    upd_cache: list
    extra: dict


def _scatter_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, index, values)
    return out


def _aggregate_messages(layer: GnnLayer, msg: np.ndarray, graph: Graph) -> Tuple[np.ndarray, dict]:
    n, dst = graph.n_nodes, graph.dst
    degree = graph.in_degree()
    if layer.aggregation == "mean":
        total = _scatter_sum(msg, dst, n)
        agg = np.divide(total, degree[:, None], out=np.zeros_like(total), where=degree[:, None] > 0)
        return agg, {"degree": degree}

    if layer.aggregation == "softmax":
        beta = float(layer.beta[0])
        logits = beta * msg
        peak = np.full((n, msg.shape[1]), -np.inf)
        np.maximum.at(peak, dst, logits)
        weights = np.exp(logits - peak[dst])
        weights = weights / _scatter_sum(weights, dst, n)[dst]
        return _scatter_sum(weights * msg, dst, n), {"weights": weights}

    z, pre_cache = forward_with_cache(layer.pre_map, msg)
    n_p = layer.n_p
    raw = z[:, n_p:]
    chol_e = cholesky_from_raw_batch(raw, n_p)
    t_sum = _scatter_sum(z[:, :n_p], dst, n)
    f_sum = _scatter_sum(chol_e @ np.swapaxes(chol_e, 1, 2), dst, n)
    isolated = degree == 0
    f_sum[isolated] = np.eye(n_p)
    chol_v = cho_factor_batch(f_sum)
    agg = cho_solve_batch(chol_v, t_sum)
    return agg, {"pre_cache": pre_cache, "raw": raw, "chol_e": chol_e, "chol_v": chol_v}


def _aggregate_backward(
    layer: GnnLayer, graph: Graph, cache: _LayerCache, grad_agg: np.ndarray
) -> Tuple[np.ndarray, ParamDict]:
    """dLoss/dmessages and any aggregation parameter gradients (unprefixed)."""
    dst, msg, agg = graph.dst, cache.msg, cache.agg
    if layer.aggregation == "mean":
        degree = cache.extra["degree"]
        return grad_agg[dst] / degree[dst][:, None], {}

    if layer.aggregation == "softmax":
        beta = float(layer.beta[0])
        weights = cache.extra["weights"]
        g = grad_agg[dst]
        centred = msg - agg[dst]
        grad_msg = g * weights * (1.0 + beta * centred)
        return grad_msg, {"beta": np.array([np.sum(g * weights * msg * centred)])}

    n_p = layer.n_p
    lam = cho_solve_batch(cache.extra["chol_v"], grad_agg)
    grad_f_node = -np.einsum("vi,vj->vij", lam, agg)
    grad_f_edge = grad_f_node[dst]
    grad_chol = (grad_f_edge + np.swapaxes(grad_f_edge, 1, 2)) @ cache.extra["chol_e"]
    grad_raw = raw_grad_from_chol_grad(grad_chol, cache.extra["raw"], n_p)
    grad_z = np.concatenate([lam[dst], grad_raw], axis=1)
    pre_grads = backward(layer.pre_map, msg, grad_z, cache.extra["pre_cache"])
    return pre_grads.input, gradients_to_dict(pre_grads, "premap")


def layer_forward(layer: GnnLayer, h: np.ndarray, graph: Graph) -> Tuple[np.ndarray, _LayerCache]:
    msg_in = np.concatenate([h[graph.src], graph.edge_features], axis=1)
    msg, msg_cache = forward_with_cache(layer.message_net, msg_in)
    agg, extra = _aggregate_messages(layer, msg, graph)
    upd_in = np.concatenate([h, agg], axis=1)
    upd, upd_cache = forward_with_cache(layer.update_net, upd_in)
    h_out = h + upd if layer.residual else upd
    return h_out, _LayerCache(h, msg_in, msg, msg_cache, agg, upd_in, upd_cache, extra)


def layer_backward(
    layer: GnnLayer, graph: Graph, cache: _LayerCache, grad_out: np.ndarray
) -> Tuple[np.ndarray, ParamDict]:
    hidden = layer.hidden_dim
    grad_h = grad_out.copy() if layer.residual else np.zeros_like(grad_out)
    upd_grads = backward(layer.update_net, cache.upd_in, grad_out, cache.upd_cache)
    grads = gradients_to_dict(upd_grads, "update")
    grad_h += upd_grads.input[:, :hidden]
    grad_msg, agg_grads = _aggregate_backward(layer, graph, cache, upd_grads.input[:, hidden:])
    grads.update(agg_grads)
    msg_grads = backward(layer.message_net, cache.msg_in, grad_msg, cache.msg_cache)
    grads.update(gradients_to_dict(msg_grads, "message"))
    np.add.at(grad_h, graph.src, msg_grads.input[:, :hidden])
    return grad_h, grads


def _forward_all(model: GnnModel, graph: Graph):
    if graph.node_features.shape[1] != model.encoder.input_dim:
        raise ShapeError(
            f"Graph has {graph.node_features.shape[1]} node features, model expects {model.encoder.input_dim}"
        )
    if model.layers and graph.edge_features.shape[1] + model.layers[0].hidden_dim != model.layers[0].message_net.input_dim:
        raise ShapeError("Edge feature width does not match the message network input")
    x = (graph.node_features - model.node_shift) / model.node_scale
    h, enc_cache = forward_with_cache(model.encoder, x)
    caches = []
    for layer in model.layers:
        h, cache = layer_forward(layer, h, graph)
        caches.append(cache)
    logits, read_cache = forward_with_cache(model.readout, h)
    return x, h, logits, enc_cache, caches, read_cache


def gnn_forward(model: GnnModel, graph: Graph) -> np.ndarray:
    """Per-node task logits, (n_nodes, n_tasks)."""
    return _forward_all(model, graph)[2]


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, logits) - labels * logits))


def gnn_loss_and_gradients(model: GnnModel, graph: Graph, nodes: np.ndarray) -> Tuple[float, ParamDict]:
    """Mean binary cross-entropy over `nodes` and all tasks, with parameter gradients."""
    x, h, logits, enc_cache, caches, read_cache = _forward_all(model, graph)
    labels = graph.labels[nodes]
    loss = bce_with_logits(logits[nodes], labels)

    grad_logits = np.zeros_like(logits)
    grad_logits[nodes] = (expit(logits[nodes]) - labels) / labels.size
    read_grads = backward(model.readout, h, grad_logits, read_cache)
    grads = gradients_to_dict(read_grads, "readout")
    grad_h = read_grads.input
    for k in range(len(model.layers) - 1, -1, -1):
        grad_h, layer_grads = layer_backward(model.layers[k], graph, caches[k], grad_h)
        grads.update({f"layer{k}.{name}": g for name, g in layer_grads.items()})
    grads.update(gradients_to_dict(backward(model.encoder, x, grad_h, enc_cache), "encoder"))
    return loss, grads


def evaluate_nodes(model: GnnModel, graph: Graph, nodes: np.ndarray) -> float:
    logits = gnn_forward(model, graph)
    return mean_roc_auc(logits[nodes], graph.labels[nodes])


def epochs_to_reach(metric_history: Sequence[float], target: float) -> Optional[int]:
    """First (1-based) epoch whose metric reaches `target`, or None."""
    for epoch, value in enumerate(metric_history, start=1):
        if value >= target:
            return epoch
    return None


def gnn_train(
    model: GnnModel,
    graph: Graph,
    config,
    test_graph: Optional[Graph] = None,
) -> Tuple[GnnModel, GraphHistory]:
    """
    Full-graph Adam training on the train mask with early stopping on the
    validation ROC-AUC: training stops once more than `config.patience`
    epochs pass without improvement. The test metric is read from the test
    mask of `test_graph` (defaults to `graph`). Parameters of the best
    validation epoch are restored at the end.
    """
    for name in ("train", "valid", "test"):
        if name not in graph.masks or graph.masks[name].size == 0:
            raise ConfigurationError(f"Graph is missing a non-empty '{name}' mask")
    test_graph = test_graph or graph
    params = model.parameters()
    adam = init_adam(params, learning_rate=config.learning_rate)
    history = GraphHistory()
    best_valid, best_params, stale = -np.inf, snapshot(params), 0
    last_finite = snapshot(params)

    for epoch in tqdm(range(1, config.max_epochs + 1), desc=f"gnn-{model.aggregation}", disable=not config.progress):
        try:
            loss, grads = gnn_loss_and_gradients(model, graph, graph.masks["train"])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"Non-finite loss at epoch {epoch}", epoch=epoch)
            adam_step(params, grads, adam)
        except (TrainingDivergenceError, FactorizationError) as exc:
            restore(params, last_finite)
            logger.error("gnn-%s diverged at epoch %d; restored last finite parameters", model.aggregation, epoch)
            raise TrainingDivergenceError(str(exc), epoch=epoch, model=model) from exc
        last_finite = snapshot(params)

        try:
            valid = evaluate_nodes(model, graph, graph.masks["valid"])
            test = evaluate_nodes(model, test_graph, test_graph.masks["test"])
        except UndefinedMetricError:
            logger.error("ROC-AUC undefined on the validation or test mask")
            raise
        history.train_loss.append(loss)
        history.valid_metric.append(valid)
        history.test_metric.append(test)

        if valid > best_valid:
            best_valid, best_params, stale = valid, snapshot(params), 0
            history.best_epoch = epoch
        else:
            stale += 1
        if epoch % config.log_every == 0:
            logger.info(
                "gnn-%s epoch %d loss=%.4f valid_auc=%.4f test_auc=%.4f",
                model.aggregation, epoch, loss, valid, test,
            )
        if stale > config.patience:
            history.stopped_early = True
            logger.info("gnn-%s early stop at epoch %d (best epoch %d)", model.aggregation, epoch, history.best_epoch)
            break

    restore(params, best_params)
    return model, history
