import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from models.graph import Graph
from services.config_service import GraphTrainingConfig
from services.errors import ConfigurationError, ShapeError
from services.fishnets_service import aggregate, cholesky_from_raw
from services.graph_service import (
    GRAPH_AGGREGATIONS,
    build_gnn_model,
    count_gnn_params,
    epochs_to_reach,
    evaluate_nodes,
    fishnets_neighborhood_agg,
    fit_node_scaling,
    gnn_forward,
    gnn_loss_and_gradients,
    gnn_train,
    layer_forward,
    match_width,
    softmax_neighborhood_agg,
)
from services.nn_service import forward
from services.simulation_service import ToyGraphConfig, generate_toy_graph


def _small_graph():
    """Six nodes, node 5 isolated, two tasks."""
    pairs = [(0, 1), (1, 2), (2, 0), (2, 3), (3, 4)]
    src = [a for a, b in pairs] + [b for a, b in pairs]
    dst = [b for a, b in pairs] + [a for a, b in pairs]
    rng = np.random.default_rng(0)
    return Graph(
        node_features=rng.normal(size=(6, 2)),
        edge_index=np.array([src, dst]),
        edge_features=rng.uniform(size=(len(src), 1)),
        labels=np.array([[1, 0], [0, 1], [1, 1], [0, 0], [1, 0], [0, 1]]),
    )


def _training_config(**overrides):
    values = {"max_epochs": 8, "patience": 3, "learning_rate": 5e-3, "log_every": 100, "progress": False}
    values.update(overrides)
    return GraphTrainingConfig(**values)


def _toy(n_nodes=120, seed=0, **kwargs):
    return generate_toy_graph(ToyGraphConfig(n_nodes=n_nodes, mean_degree=6.0, n_tasks=2, **kwargs), seed=seed)


def test_fishnets_neighborhood_is_information_weighted():
    raw = np.array([[np.log(np.e - 1.0)], [np.log(np.exp(np.sqrt(3.0)) - 1.0)]])
    value = fishnets_neighborhood_agg(np.array([[1.0], [9.0]]), raw, n_p=1)
    assert value[0] == pytest.approx(2.5, rel=1e-12)


def test_fishnets_neighborhood_of_one_message():
    raw = np.array([0.3, -0.2, 0.8])
    t = np.array([1.0, 2.0])
    fisher = cholesky_from_raw(raw, 2).matrix
    assert_allclose(fishnets_neighborhood_agg(t[None, :], raw[None, :], 2), np.linalg.solve(fisher, t), rtol=1e-10)


def test_identical_neighbors_give_the_single_neighbor_estimate():
    raw = np.array([[0.4, 0.1, -0.5]])
    t = np.array([[0.7, -1.1]])
    one = fishnets_neighborhood_agg(t, raw, 2)
    many = fishnets_neighborhood_agg(np.repeat(t, 5, axis=0), np.repeat(raw, 5, axis=0), 2)
    assert_allclose(many, one, rtol=1e-10)


def test_duplicated_neighborhood_doubles_the_sums_and_keeps_the_estimate():
    rng = np.random.default_rng(4)
    t, raw = rng.normal(size=(3, 2)), rng.normal(size=(3, 3))
    doubled_t, doubled_raw = np.concatenate([t, t]), np.concatenate([raw, raw])

    t_sum, f_sum = aggregate([(s, cholesky_from_raw(r, 2)) for s, r in zip(t, raw)])
    t_twice, f_twice = aggregate([(s, cholesky_from_raw(r, 2)) for s, r in zip(doubled_t, doubled_raw)])
    assert_allclose(t_twice, 2.0 * t_sum, rtol=1e-12, atol=1e-12)
    assert_allclose(f_twice.matrix, 2.0 * f_sum.matrix, rtol=1e-12, atol=1e-12)

    once = fishnets_neighborhood_agg(t, raw, 2)
    assert_allclose(fishnets_neighborhood_agg(doubled_t, doubled_raw, 2), once, rtol=1e-10)
    assert_allclose(once, np.linalg.solve(f_sum.matrix, t_sum), rtol=1e-10)


def test_empty_neighborhoods_aggregate_to_zero():
    assert_array_equal(fishnets_neighborhood_agg(np.zeros((0, 2)), np.zeros((0, 3)), 2), np.zeros(2))
    assert_array_equal(softmax_neighborhood_agg(np.zeros((0, 3)), 1.0), np.zeros(3))


def test_fishnets_neighborhood_rejects_ragged_inputs():
    with pytest.raises(ShapeError):
        fishnets_neighborhood_agg(np.zeros((2, 1)), np.zeros((3, 1)), 1)


def test_softmax_neighborhood_examples():
    messages = np.array([[0.0], [np.log(3.0)]])
    assert softmax_neighborhood_agg(messages, 1.0)[0] == pytest.approx(0.823959, abs=1e-6)
    assert softmax_neighborhood_agg(messages, 0.0)[0] == pytest.approx(np.log(3.0) / 2.0)


@pytest.mark.parametrize("aggregation", GRAPH_AGGREGATIONS)
def test_batched_layer_matches_per_neighborhood_aggregation(aggregation):
    graph = _small_graph()
    model = build_gnn_model(aggregation, 2, 1, hidden=4, width=5, n_layers=1, n_tasks=2, n_p=2, seed=1)
    layer = model.layers[0]
    layer.beta[...] = 0.6
    h = forward(model.encoder, graph.node_features)
    _, cache = layer_forward(layer, h, graph)

    for v in range(graph.n_nodes):
        edges = graph.neighborhood(v)
        msg = cache.msg[edges]
        if aggregation == "mean":
            expected = msg.mean(axis=0) if edges.size else np.zeros(msg.shape[1])
        elif aggregation == "softmax":
            expected = softmax_neighborhood_agg(msg, 0.6)
        else:
            z = forward(layer.pre_map, msg) if edges.size else np.zeros((0, 5))
            expected = fishnets_neighborhood_agg(z[:, :2], z[:, 2:], 2)
        assert_allclose(cache.agg[v], expected, rtol=1e-9, atol=1e-12)
    assert_array_equal(cache.agg[5], 0.0)


def test_zero_layer_model_ignores_edges():
    graph = _small_graph()
    model = build_gnn_model("mean", 2, 1, hidden=4, width=5, n_layers=0, n_tasks=2, seed=0)
    bare = Graph(
        node_features=graph.node_features,
        edge_index=np.zeros((2, 0)),
        edge_features=np.zeros((0, 1)),
        labels=graph.labels,
    )
    assert_array_equal(gnn_forward(model, graph), gnn_forward(model, bare))


@pytest.mark.parametrize("aggregation", GRAPH_AGGREGATIONS)
def test_forward_is_node_permutation_equivariant(aggregation):
    graph = _toy(n_nodes=40)
    model = build_gnn_model(aggregation, 1, 1, hidden=6, width=6, n_layers=2, n_tasks=2, n_p=2, seed=3)
    perm = np.random.default_rng(4).permutation(graph.n_nodes)
    new_id = np.argsort(perm)
    permuted = Graph(
        node_features=graph.node_features[perm],
        edge_index=new_id[graph.edge_index],
        edge_features=graph.edge_features,
        labels=graph.labels[perm],
    )
    assert_allclose(gnn_forward(model, permuted), gnn_forward(model, graph)[perm], rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("aggregation", GRAPH_AGGREGATIONS)
def test_gnn_gradients_match_finite_differences(aggregation, numeric_grad):
    graph = _small_graph()
    model = build_gnn_model(aggregation, 2, 1, hidden=4, width=5, n_layers=2, n_tasks=2, n_p=2, seed=2)
    nodes = np.array([0, 2, 3, 5])
    params = model.parameters()
    assert ("layer0.beta" in params) == (aggregation == "softmax")
    assert ("layer1.premap.w0" in params) == (aggregation == "fishnets")

    _, grads = gnn_loss_and_gradients(model, graph, nodes)
    assert set(grads) == set(params)
    for name in params:
        numeric = numeric_grad(lambda: gnn_loss_and_gradients(model, graph, nodes)[0], params, name)
        for idx, value in numeric.items():
            assert grads[name][idx] == pytest.approx(value, rel=1e-4, abs=1e-7)


@pytest.mark.parametrize("aggregation", GRAPH_AGGREGATIONS)
def test_parameter_count_formula(aggregation):
    model = build_gnn_model(aggregation, 2, 2, hidden=8, width=12, n_layers=3, n_tasks=4, n_p=3, seed=0)
    assert count_gnn_params(aggregation, 2, 2, 8, 12, 3, 4, 3) == model.n_params


def test_match_width_is_closest_count():
    target = count_gnn_params("fishnets", 2, 2, 32, 32, 3, 4, 4)
    width = match_width("mean", target, 2, 2, 32, 3, 4)
    best = abs(count_gnn_params("mean", 2, 2, 32, width, 3, 4) - target)
    for neighbor in (width - 1, width + 1):
        assert best <= abs(count_gnn_params("mean", 2, 2, 32, neighbor, 3, 4) - target)


def test_fishnets_model_needs_parameters():
    with pytest.raises(ConfigurationError):
        build_gnn_model("fishnets", 2, 1, hidden=4, width=5, n_layers=1, n_tasks=1, n_p=0)


def test_unknown_neighborhood_aggregation():
    with pytest.raises(ConfigurationError):
        build_gnn_model("max", 2, 1, hidden=4, width=5, n_layers=1, n_tasks=1)


def test_model_rejects_graph_with_wrong_feature_width():
    model = build_gnn_model("mean", 3, 1, hidden=4, width=5, n_layers=1, n_tasks=2)
    with pytest.raises(ShapeError):
        gnn_forward(model, _small_graph())


def test_epochs_to_reach():
    assert epochs_to_reach([0.5, 0.6, 0.72, 0.7], 0.7) == 3
    assert epochs_to_reach([0.5, 0.6], 0.9) is None


def test_patience_zero_stops_after_first_non_improving_epoch():
    graph = _toy()
    model = build_gnn_model("mean", 1, 1, hidden=8, width=8, n_layers=2, n_tasks=2, seed=0)
    model.node_shift, model.node_scale = fit_node_scaling(graph)
    _, history = gnn_train(model, graph, _training_config(max_epochs=40, patience=0))

    metric = history.valid_metric
    for k in range(1, len(metric) - 1):
        assert metric[k] > max(metric[:k])
    if history.stopped_early:
        assert metric[-1] <= max(metric[:-1])
    else:
        assert len(metric) == 40


def test_training_restores_best_validation_epoch():
    graph = _toy(seed=1)
    model = build_gnn_model("softmax", 1, 1, hidden=8, width=8, n_layers=2, n_tasks=2, seed=1)
    model.node_shift, model.node_scale = fit_node_scaling(graph)
    _, history = gnn_train(model, graph, _training_config(max_epochs=12, patience=12, learning_rate=2e-2))
    assert 1 <= history.best_epoch <= len(history.valid_metric)
    assert history.best_valid_metric == max(history.valid_metric)
    assert evaluate_nodes(model, graph, graph.masks["valid"]) == pytest.approx(history.best_valid_metric)


def test_gnn_training_is_deterministic():
    graph = _toy(seed=2, noisy=True)
    runs = []
    for _ in range(2):
        model = build_gnn_model("fishnets", 2, 2, hidden=8, width=8, n_layers=2, n_tasks=2, n_p=2, seed=5)
        model.node_shift, model.node_scale = fit_node_scaling(graph)
        _, history = gnn_train(model, graph, _training_config(max_epochs=4))
        runs.append((history.train_loss, history.test_metric, gnn_forward(model, graph)))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    assert_array_equal(runs[0][2], runs[1][2])


def test_training_needs_all_masks():
    graph = _small_graph()
    model = build_gnn_model("mean", 2, 1, hidden=4, width=5, n_layers=1, n_tasks=2)
    with pytest.raises(ConfigurationError):
        gnn_train(model, graph, _training_config())


@pytest.mark.slow
def test_mean_aggregation_learns_neighborhood_labels():
    graph = _toy(n_nodes=400, seed=3)
    model = build_gnn_model("mean", 1, 1, hidden=16, width=16, n_layers=2, n_tasks=2, seed=0)
    model.node_shift, model.node_scale = fit_node_scaling(graph)
    _, history = gnn_train(model, graph, _training_config(max_epochs=150, patience=150, learning_rate=1e-2))
    assert history.best_valid_metric > 0.7
