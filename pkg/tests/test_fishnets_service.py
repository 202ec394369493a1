from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from models.set_dataset import SetDataset
from services.errors import (
    EmptyAggregationError,
    FactorizationError,
    IllConditionedFisherError,
    ShapeError,
)
from services.fishnets_service import (
    FisherMatrix,
    aggregate,
    build_fishnets_model,
    cholesky_from_raw,
    cholesky_from_raw_batch,
    embed_datum,
    evaluate_loss,
    evaluate_sets,
    factor_spd,
    fishnets_loss,
    fit_input_scaling,
    fit_score_scaling,
    loss_and_gradients,
    mle_estimate,
    summarize_set,
    train,
)
from services.simulation_service import LinRegPrior, simulate_linreg

PRIOR = LinRegPrior()


def _fisher(matrix):
    return FisherMatrix(chol=np.linalg.cholesky(np.asarray(matrix, dtype=float)))


def test_cholesky_from_zero_raw_is_softplus_zero_squared():
    fisher = cholesky_from_raw(np.array([0.0]), 1)
    assert fisher.chol[0, 0] == pytest.approx(np.log(2.0))
    assert fisher.matrix[0, 0] == pytest.approx(0.480453, abs=1e-6)


def test_large_diagonal_raw_gives_squared_diagonal():
    fisher = cholesky_from_raw(np.array([40.0, 0.0, 30.0]), 2)
    assert_allclose(np.diag(fisher.matrix), [1600.0, 900.0], rtol=1e-10)


def test_cholesky_from_raw_is_always_positive_definite():
    raw = np.random.default_rng(3).normal(size=(10_000, 6))
    chol = cholesky_from_raw_batch(raw, 3)
    assert np.all(np.diagonal(chol, axis1=1, axis2=2) > 0)
    assert_array_equal(np.triu(chol, k=1), 0.0)
    matrices = np.einsum("rij,rkj->rik", chol, chol)
    assert_array_equal(matrices, np.swapaxes(matrices, 1, 2))
    assert np.all(np.linalg.eigvalsh(matrices) > 0)
    np.linalg.cholesky(matrices)


def test_cholesky_from_raw_rejects_wrong_length():
    with pytest.raises(ShapeError):
        cholesky_from_raw(np.zeros(4), 2)


def test_embed_datum_of_zero_weight_nets_returns_biases():
    model = build_fishnets_model(3, 2, [8], "elu", seed=0)
    for net in (model.score_net, model.fisher_net):
        for w in net.weights:
            w[...] = 0.0
    model.score_net.biases[-1][...] = [0.5, -1.5]
    model.fisher_net.biases[-1][...] = [0.2, 0.1, -0.3]
    score, fisher = embed_datum(model, np.array([1.0, 2.0, 3.0]))
    assert_array_equal(score, [0.5, -1.5])
    assert_allclose(fisher.matrix, cholesky_from_raw(np.array([0.2, 0.1, -0.3]), 2).matrix)


def test_identical_datapoints_embed_identically():
    model = build_fishnets_model(3, 2, [8, 8], "swish", seed=1)
    d = np.array([0.4, -0.1, 2.0])
    a, b = embed_datum(model, d), embed_datum(model, d.copy())
    assert_array_equal(a[0], b[0])
    assert_array_equal(a[1].chol, b[1].chol)


def test_aggregate_single_element_is_unchanged():
    t, fisher = aggregate([(np.array([1.0, 2.0]), _fisher([[2.0, 0.5], [0.5, 1.0]]))])
    assert_array_equal(t, [1.0, 2.0])
    assert_allclose(fisher.matrix, [[2.0, 0.5], [0.5, 1.0]], rtol=1e-14)


def test_aggregate_two_copies_doubles():
    item = (np.array([1.0, -1.0]), _fisher([[2.0, 0.5], [0.5, 1.0]]))
    t, fisher = aggregate([item, item])
    assert_array_equal(t, [2.0, -2.0])
    assert_allclose(fisher.matrix, [[4.0, 1.0], [1.0, 2.0]], rtol=1e-14)


def test_flat_fisher_reduces_to_mean_of_scores():
    model = build_fishnets_model(3, 2, [8], "elu", seed=4)
    unit = np.log(np.e - 1.0)
    for w in model.fisher_net.weights:
        w[...] = 0.0
    model.fisher_net.biases[-1][...] = [unit, 0.0, unit]
    data = simulate_linreg(PRIOR, 25, seed=6).data
    scores = np.stack([embed_datum(model, row)[0] for row in data])
    assert_allclose(summarize_set(model, data).theta_hat, scores.mean(axis=0), rtol=1e-10, atol=1e-12)


def test_aggregate_empty_raises():
    with pytest.raises(EmptyAggregationError):
        aggregate([])


def test_summarize_set_is_permutation_invariant_bit_for_bit():
    model = build_fishnets_model(3, 2, [16, 16], "elu", seed=2)
    data = simulate_linreg(PRIOR, 40, seed=5).data
    permuted = data[np.random.default_rng(0).permutation(40)]
    a, b = summarize_set(model, data), summarize_set(model, permuted)
    assert_array_equal(a.t_nn, b.t_nn)
    assert_array_equal(a.f_nn.matrix, b.f_nn.matrix)
    assert_array_equal(a.theta_hat, b.theta_hat)


def test_batched_evaluation_matches_per_set_summary():
    model = build_fishnets_model(3, 2, [16], "elu", seed=2)
    sets = [simulate_linreg(PRIOR, n, seed=s) for s, n in enumerate([5, 17, 30])]
    t, fisher, theta_hat = evaluate_sets(model, sets)
    for i, s in enumerate(sets):
        summary = summarize_set(model, s.data)
        assert_allclose(t[i], summary.t_nn, rtol=1e-10)
        assert_allclose(fisher[i], summary.f_nn.matrix, rtol=1e-10)
        assert_allclose(theta_hat[i], summary.theta_hat, rtol=1e-7)


def test_mle_estimate_examples():
    assert_allclose(mle_estimate(np.array([4.0, 6.0]), 2.0 * np.eye(2)), [2.0, 3.0])
    t = np.array([0.7, -1.2])
    assert_allclose(mle_estimate(t, np.eye(2), c=np.array([1.0, 1.0])), t + 1.0)


def test_mle_estimate_matches_gauss_elimination(random_spd):
    fisher = random_spd(4, seed=11)
    t = np.random.default_rng(12).normal(size=4)

    a = np.column_stack([fisher.copy(), t.copy()])
    n = 4
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        a[[col, pivot]] = a[[pivot, col]]
        for row in range(col + 1, n):
            a[row] -= a[row, col] / a[col, col] * a[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (a[row, -1] - a[row, row + 1:n] @ x[row + 1:]) / a[row, row]

    assert_allclose(mle_estimate(t, fisher), x, rtol=1e-10, atol=1e-12)


def test_mle_estimate_refuses_ill_conditioned_fisher():
    with pytest.raises(IllConditionedFisherError) as info:
        mle_estimate(np.ones(2), np.diag([1.0, 1e-14]))
    assert info.value.condition > 1e12


def test_factor_spd_rejects_indefinite_matrix():
    with pytest.raises(FactorizationError):
        factor_spd(np.array([[1.0, 0.0], [0.0, -1.0]]))


@pytest.mark.parametrize(
    "delta, fisher, expected",
    [
        ([0.0, 0.0], np.eye(2), 0.0),
        ([1.0, 0.0], np.eye(2), 0.5),
        ([1.0, 1.0], 2.0 * np.eye(2), 2.0 - np.log(2.0)),
    ],
)
def test_fishnets_loss_examples(delta, fisher, expected):
    theta_hat = np.array([0.3, -0.4])
    theta = theta_hat + np.asarray(delta)
    assert fishnets_loss(theta, theta_hat, fisher) == pytest.approx(expected, abs=1e-12)


def test_fishnets_loss_is_at_least_minus_half_logdet(random_spd):
    fisher = random_spd(3, seed=1)
    rng = np.random.default_rng(2)
    floor = -0.5 * np.linalg.slogdet(fisher)[1]
    for _ in range(20):
        theta, theta_hat = rng.normal(size=3), rng.normal(size=3)
        assert fishnets_loss(theta, theta_hat, fisher) >= floor - 1e-12


@pytest.mark.parametrize("activation_tag", ["elu", "swish", "identity"])
@pytest.mark.parametrize("with_prior", [False, True])
def test_loss_gradients_match_finite_differences(activation_tag, with_prior, numeric_grad):
    sets = [simulate_linreg(PRIOR, n, seed=s) for s, n in enumerate([6, 9, 4])]
    model = build_fishnets_model(3, 2, [6], activation_tag, seed=3, c=[0.1, -0.2])
    model.input_shift, model.input_scale = fit_input_scaling(sets)
    if with_prior:
        model.score_scale = np.array([3.0, 0.5])
        model.prior_score = np.array([0.2, -0.1])
        model.prior_fisher = np.array([[0.5, 0.1], [0.1, 0.3]])
    blocks = [s.data for s in sets]
    thetas = np.stack([s.theta for s in sets]) / 10.0
    params = model.parameters()

    _, grads = loss_and_gradients(model, blocks, thetas)
    for name in params:
        numeric = numeric_grad(lambda: loss_and_gradients(model, blocks, thetas)[0], params, name, eps=1e-6)
        for idx, value in numeric.items():
            assert grads[name][idx] == pytest.approx(value, rel=1e-4, abs=1e-6)


def test_zero_epoch_training_keeps_initialisation(training_config):
    sets = [simulate_linreg(PRIOR, 10, seed=s) for s in range(4)]
    model = build_fishnets_model(3, 2, [8], "elu", seed=0)
    before = {k: v.copy() for k, v in model.parameters().items()}
    _, history = train(model, sets, training_config(epochs=0))
    for name, value in model.parameters().items():
        assert_array_equal(value, before[name])
    assert history.train_loss == []


def test_training_is_deterministic(training_config):
    sets = [simulate_linreg(PRIOR, 20, seed=s) for s in range(12)]
    histories, params = [], []
    for _ in range(2):
        model = build_fishnets_model(3, 2, [8], "elu", seed=0)
        model.input_shift, model.input_scale = fit_input_scaling(sets)
        _, history = train(model, sets, training_config(epochs=3), valid_sets=sets[:4])
        histories.append(history)
        params.append(model.parameters())
    assert histories[0].train_loss == histories[1].train_loss
    assert histories[0].valid_loss == histories[1].valid_loss
    for name in params[0]:
        assert_array_equal(params[0][name], params[1][name])


def test_training_rejects_mismatched_sets(training_config):
    model = build_fishnets_model(3, 2, [8], "elu", seed=0)
    bad = [SetDataset(data=np.ones((4, 2)), theta=np.zeros(2))]
    with pytest.raises(ShapeError):
        train(model, bad, training_config())


@pytest.mark.slow
def test_training_lowers_validation_loss(training_config):
    train_sets = [simulate_linreg(PRIOR, 100, seed=s) for s in range(400)]
    valid_sets = [simulate_linreg(PRIOR, 100, seed=10_000 + s) for s in range(50)]
    model = build_fishnets_model(3, 2, [32, 32], "elu", seed=0)
    model.input_shift, model.input_scale = fit_input_scaling(train_sets)
    model.score_scale = fit_score_scaling(train_sets)
    initial = evaluate_loss(model, valid_sets)
    _, history = train(model, train_sets, training_config(epochs=15, batch_size=16, clip_norm=100.0), valid_sets)
    assert history.valid_loss[0] == pytest.approx(initial)
    assert initial > 0
    assert min(history.valid_loss[1:]) <= 0.5 * initial


def _degenerate_fisher_model():
    model = build_fishnets_model(3, 2, [8], "elu", seed=0)
    for w in model.fisher_net.weights:
        w[...] = 0.0
    model.fisher_net.biases[-1][...] = [40.0, 0.0, -40.0]
    return model


def test_batched_evaluation_refuses_near_singular_fisher():
    sets = [simulate_linreg(PRIOR, 20, seed=s) for s in range(3)]
    with pytest.raises(IllConditionedFisherError) as info:
        evaluate_sets(_degenerate_fisher_model(), sets)
    assert info.value.condition > 1e12
    with pytest.raises(IllConditionedFisherError):
        evaluate_loss(_degenerate_fisher_model(), sets)


def test_prior_fisher_regularises_a_degenerate_aggregate():
    sets = [simulate_linreg(PRIOR, 20, seed=s) for s in range(3)]
    model = _degenerate_fisher_model()
    model.prior_fisher = 0.01 * np.eye(2)
    _, fisher, theta_hat = evaluate_sets(model, sets)
    assert np.all(np.isfinite(theta_hat))
    assert np.all(np.linalg.cond(fisher) < 1e12)


def test_prior_terms_enter_every_path_once():
    sets = [simulate_linreg(PRIOR, n, seed=s) for s, n in enumerate([4, 11, 25])]
    model = build_fishnets_model(3, 2, [16], "swish", seed=5, c=[0.3, -0.3])
    model.input_shift, model.input_scale = fit_input_scaling(sets)
    model.score_scale = np.array([4.0, 2.0])
    model.prior_score = np.array([0.5, -1.0])
    model.prior_fisher = np.array([[2.0, 0.3], [0.3, 1.0]])

    bare = build_fishnets_model(3, 2, [16], "swish", seed=5, c=[0.3, -0.3])
    bare.input_shift, bare.input_scale = model.input_shift, model.input_scale
    bare.score_scale = model.score_scale
    t_bare, f_bare, _ = evaluate_sets(bare, sets)

    t, fisher, theta_hat = evaluate_sets(model, sets)
    assert_allclose(t, t_bare + model.prior_score, rtol=1e-12)
    assert_allclose(fisher, f_bare + model.prior_fisher, rtol=1e-12, atol=1e-12)

    losses = []
    for i, s in enumerate(sets):
        summary = summarize_set(model, s.data)
        assert_allclose(summary.t_nn, t[i], rtol=1e-10, atol=1e-10)
        assert_allclose(summary.f_nn.matrix, fisher[i], rtol=1e-10, atol=1e-10)
        assert_allclose(summary.theta_hat, theta_hat[i], rtol=1e-8, atol=1e-10)
        losses.append(fishnets_loss(s.theta, summary.theta_hat, summary.f_nn))
    assert evaluate_loss(model, sets) == pytest.approx(np.mean(losses), rel=1e-9)


def test_score_scaling_uses_root_mean_square_theta():
    sets = [SetDataset(data=np.ones((2, 3)), theta=np.array(theta)) for theta in ([3.0, 0.0], [-4.0, 0.0])]
    assert_allclose(fit_score_scaling(sets), [np.sqrt(12.5), 1.0])


@pytest.mark.parametrize(
    "field, value",
    [
        ("score_scale", [1.0, -1.0]),
        ("prior_fisher", [[1.0, 0.5], [0.0, 1.0]]),
        ("prior_fisher", [[1.0, 0.0], [0.0, -1.0]]),
    ],
)
def test_model_rejects_invalid_scaling_and_prior(field, value):
    model = build_fishnets_model(3, 2, [4], "elu", seed=0)
    with pytest.raises(ShapeError):
        replace(model, **{field: np.asarray(value)})
