import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from db.session import session_factory
from models.run import Run
from services.common import get_column_value_by_condition
from services.config_service import parse_config
from services.errors import ConfigurationError
from services.experiment_service import (
    build_contender,
    ensure_banks,
    evaluate_experiment,
    information_equality,
    open_run,
    run_gamma_pit,
    run_graph_ablation,
    run_robustness,
    simulate_banks,
    simulate_experiment,
    simulate_sets,
    train_models,
)
from services.fishnets_service import evaluate_sets
from services.simulation_service import LinRegPrior, linreg_mle_batch, simulate_linreg
from services.storage_service import load_arrays

SMALL_DEEPSET = {"hidden": [8], "embed_dim": 4, "global_hidden": [8]}


def _tiny(**overrides):
    payload = {
        "experiment": "smoke",
        "seed": 0,
        "data": {"n_train": 8, "n_valid": 4, "n_test": 8, "n_data_train": 20, "n_data_test": 30},
        "models": [{"kind": "fishnets", "hidden": [8]}],
        "training": {"epochs": 2, "batch_size": 4},
    }
    payload.update(overrides)
    return parse_config(payload)


def _runs(run_dir):
    db = session_factory(run_dir)()
    try:
        return db.query(Run).order_by(Run.id).all()
    finally:
        db.close()


def test_open_run_marks_failure(tmp_path):
    with pytest.raises(RuntimeError):
        with open_run(_tiny(), "eval", tmp_path):
            raise RuntimeError("boom")
    (run,) = _runs(tmp_path)
    assert run.status == "Failed"
    assert "boom" in run.error
    assert (tmp_path / "config.json").exists()


def test_open_run_defaults_to_hashed_directory(tmp_path):
    with open_run(_tiny(), "simulate") as ctx:
        assert ctx.run_dir.parent == tmp_path / "runs"
        assert ctx.run_dir.name == f"smoke-{ctx.config_hash}"
    assert _runs(ctx.run_dir)[0].status == "Completed"


def test_simulated_banks_are_reproducible_per_split():
    config = _tiny()
    a = simulate_sets(config, "train", 3, 10)
    b = simulate_sets(config, "train", 3, 10)
    test = simulate_sets(config, "test", 3, 10)
    for x, y in zip(a, b):
        assert_array_equal(x.data, y.data)
    assert not np.array_equal(a[0].data, test[0].data)


def test_ensure_banks_reloads_what_was_simulated(tmp_path):
    with open_run(_tiny(), "simulate", tmp_path) as ctx:
        banks = simulate_banks(ctx)
        reloaded = ensure_banks(ctx)
    assert [len(reloaded[s]) for s in ("train", "valid", "test")] == [8, 4, 8]
    for a, b in zip(banks["test"], reloaded["test"]):
        assert_array_equal(a.data, b.data)


def test_information_equality_holds_for_the_analytic_mle():
    cov, inverse_fisher = information_equality(LinRegPrior(), np.array([1.0, 1.0]), 2000, 100, seed=0)
    assert_allclose(np.diag(cov), np.diag(inverse_fisher), rtol=0.12)


def test_linreg_pipeline_across_commands(tmp_path):
    config = _tiny()
    with open_run(config, "simulate", tmp_path) as ctx:
        assert simulate_experiment(ctx) == 20
    with open_run(config, "train", tmp_path) as ctx:
        models, table = train_models(ctx, ensure_banks(ctx))
    assert list(models) == ["fishnets"]
    assert {r.metric for r in table.rows} == {"train_loss_final", "valid_loss_initial", "valid_loss_best"}
    with open_run(config, "eval", tmp_path) as ctx:
        table = evaluate_experiment(ctx)

    metrics = {(r.model, r.metric) for r in table.rows}
    for name in ("m", "b"):
        assert ("fishnets", f"rmse_vs_mle_{name}") in metrics
        assert ("fishnets", f"bias_vs_mle_{name}") in metrics
        assert ("analytic-mle", f"rmse_vs_truth_{name}") in metrics
    assert table.value("analytic-mle", "cov_vs_inverse_fisher_max_rel") < 0.5
    assert all(r.n_params == models["fishnets"].n_params for r in table.rows if r.model == "fishnets")

    arrays, _ = load_arrays(tmp_path / "results" / "linreg_saturation")
    assert arrays["theta_nn"].shape == (8, 2)
    assert arrays["predicted_score"].shape == (30, 2)
    assert [r.status for r in _runs(tmp_path)] == ["Completed"] * 3


def test_robustness_rows_for_every_contender(tmp_path):
    config = _tiny(
        experiment="robustness",
        models=[
            {"kind": "fishnets", "hidden": [8]},
            {"kind": "deepset", **SMALL_DEEPSET},
            {"kind": "softmax", **SMALL_DEEPSET},
        ],
        robustness={"n_test": 5, "n_data": 40},
    )
    with open_run(config, "robustness", tmp_path) as ctx:
        table = run_robustness(ctx)
    for label in ("fishnets", "deepset", "softmax"):
        for suffix in ("shifted", "in_distribution"):
            assert np.isfinite(table.value(label, f"mse_m_{suffix}"))
    assert table.value("analytic-mle", "mse_b_shifted") >= 0.0


def test_robustness_needs_linreg_data(tmp_path):
    config = _tiny(experiment="robustness", data={"generator": "gamma"})
    with pytest.raises(ConfigurationError):
        with open_run(config, "robustness", tmp_path) as ctx:
            run_robustness(ctx)


def test_gamma_pit_run(tmp_path):
    config = _tiny(
        experiment="gamma",
        data={"generator": "gamma", "n_train": 8, "n_valid": 0, "n_test": 12, "n_data_train": 30, "n_data_test": 30},
    )
    with open_run(config, "gamma-pit", tmp_path) as ctx:
        table, records = run_gamma_pit(ctx)
    assert records["pit"].shape == (12, 2)
    kept = records["pit"][~records["flagged"]]
    assert np.all((kept >= 0.0) & (kept <= 1.0))
    assert table.value("fishnets", "pit_flagged") == records["flagged"].sum()
    assert 0.0 < table.value("fishnets", "acceptance_rate") <= 1.0
    metrics = {r.metric for r in table.rows}
    assert {"ks_statistic_mu", "ks_pvalue_scale"} <= metrics


def test_evaluate_rejects_graph_experiment(tmp_path):
    with pytest.raises(ConfigurationError):
        with open_run(_tiny(experiment="graph"), "eval", tmp_path) as ctx:
            evaluate_experiment(ctx)


def test_graph_ablation_run(tmp_path):
    config = _tiny(
        experiment="graph",
        graph={
            "graph": {"n_nodes": 100, "mean_degree": 6.0, "n_tasks": 2},
            "models": [
                {"aggregation": "fishnets", "n_layers": 1, "hidden": 8, "width": 8, "n_p": 2},
                {"aggregation": "mean", "n_layers": 1, "hidden": 8},
                {"aggregation": "softmax", "n_layers": 1, "hidden": 8},
            ],
            "training": {"max_epochs": 3, "patience": 5},
            "seeds": [0],
        },
    )
    with open_run(config, "graph-ablation", tmp_path) as ctx:
        table, outcomes = run_graph_ablation(ctx)

    assert set(outcomes) == {f"{a}/{s}" for a in ("fishnets", "mean", "softmax") for s in ("noisefree", "noisy")}
    reference = outcomes["fishnets/noisefree"]["n_params"]
    for aggregation in ("mean", "softmax"):
        assert abs(outcomes[f"{aggregation}/noisy"]["n_params"] - reference) <= 0.1 * reference
        assert 0.0 <= table.value(aggregation, "test_roc_auc_noisy") <= 1.0
    assert np.isfinite(table.value("fishnets", "degradation"))
    mean_rows = [r for r in table.rows if r.model == "mean" and r.metric.startswith("epochs_to_mean_best_")]
    assert {r.metric for r in mean_rows} == {"epochs_to_mean_best_noisefree", "epochs_to_mean_best_noisy"}
    assert all(1 <= r.value <= 3 and r.seed == 0 for r in table.rows if r.metric.startswith("epochs_to_mean_best_"))
    assert (tmp_path / "graphs" / "noisy_0.npz").exists()
    assert (tmp_path / "models" / "gnn_fishnets_noisy.npz").exists()

    db = session_factory(tmp_path)()
    try:
        assert get_column_value_by_condition(db, Run, "command", "graph-ablation", "status") == "Completed"
    finally:
        db.close()


def test_ensure_banks_rejects_banks_from_another_config(tmp_path):
    with open_run(_tiny(), "simulate", tmp_path) as ctx:
        simulate_banks(ctx)
    with pytest.raises(ConfigurationError):
        with open_run(_tiny(seed=5), "eval", tmp_path) as ctx:
            ensure_banks(ctx)
    assert _runs(tmp_path)[-1].status == "Failed"


def test_fishnets_contender_carries_score_scaling_and_prior():
    config = _tiny(data={"linreg": {"cinv_p": [[0.01, 0.0], [0.0, 0.01]], "theta_fid": [1.0, -1.0]}})
    sets = simulate_sets(config, "train", 6, 10)
    model = build_contender(config.models[0], sets, config.data)
    assert_allclose(model.score_scale, np.sqrt(np.mean(np.stack([s.theta for s in sets]) ** 2, axis=0)))
    assert_allclose(model.prior_fisher, 0.01 * np.eye(2))
    assert_allclose(model.prior_score, 0.01 * np.array([-1.0, 1.0]))
    assert_allclose(model.c, [1.0, -1.0])

    bare = parse_config({"models": [{"kind": "fishnets", "hidden": [8], "score_scaling": False, "include_prior": False}]})
    model = build_contender(bare.models[0], sets, bare.data)
    assert_array_equal(model.score_scale, 1.0)
    assert not model.has_prior
    assert_array_equal(model.c, 0.0)


def test_gamma_contender_has_no_prior_terms():
    config = _tiny(data={"generator": "gamma", "n_train": 4, "n_data_train": 20})
    sets = simulate_sets(config, "train", 4, 20)
    assert not build_contender(config.models[0], sets, config.data).has_prior


def test_dotted_model_names_are_reused_by_later_commands(tmp_path):
    config = _tiny(models=[{"kind": "fishnets", "name": "fishnets.v2", "hidden": [8]}])
    with open_run(config, "train", tmp_path) as ctx:
        trained, _ = train_models(ctx, ensure_banks(ctx))
    assert (tmp_path / "models" / "fishnets.v2.npz").exists()
    with open_run(config, "eval", tmp_path) as ctx:
        table = evaluate_experiment(ctx)
    assert table.value("fishnets.v2", "rmse_vs_mle_m") >= 0.0
    train_runs = [r for r in _runs(tmp_path) if r.command == "train"]
    assert len(train_runs) == 1


# --- miniature versions of the headline studies --------------------------------------


def _linreg_study(**overrides):
    payload = {
        "experiment": "linreg",
        "seed": 0,
        "data": {
            "n_train": 300, "n_valid": 40, "n_test": 30, "n_data_train": 500, "n_data_test": 5000,
            "linreg": {"cinv_p": [[0.01, 0.0], [0.0, 0.01]]},
        },
        "models": [{"kind": "fishnets", "hidden": [32, 32]}],
        "training": {"epochs": 40, "batch_size": 16, "learning_rate": 1e-3,
                     "decay_milestones": [25, 35], "clip_norm": 100.0},
    }
    payload.update(overrides)
    return parse_config(payload)


@pytest.mark.slow
def test_fishnets_tracks_the_analytic_mle_on_larger_sets(tmp_path):
    config = _linreg_study()
    with open_run(config, "eval", tmp_path) as ctx:
        table = evaluate_experiment(ctx)
    # theta is drawn with standard deviation 10 per component
    for name in ("m", "b"):
        assert table.value("fishnets", f"rmse_vs_mle_{name}") <= 1.0
        assert abs(table.value("fishnets", f"bias_vs_mle_{name}")) <= 0.5
    assert table.value("analytic-mle", "cov_vs_inverse_fisher_max_rel") <= 0.1


@pytest.mark.slow
def test_trained_fishnets_scales_to_ten_thousand_data_without_retraining(tmp_path):
    train_config = _linreg_study(data={
        "n_train": 300, "n_valid": 40, "n_test": 5, "n_data_train": 500, "n_data_test": 500,
        "linreg": {"cinv_p": [[0.01, 0.0], [0.0, 0.01]]},
    })
    with open_run(train_config, "train", tmp_path) as ctx:
        trained, _ = train_models(ctx, ensure_banks(ctx))
    model = trained["fishnets"]
    prior = train_config.data.linreg.to_prior()
    big = [simulate_linreg(prior, 10_000, seed=500 + s) for s in range(10)]
    _, fisher, theta_nn = evaluate_sets(model, big)
    theta_mle, _ = linreg_mle_batch(big, prior)
    small = [simulate_linreg(prior, 500, seed=900 + s) for s in range(10)]
    _, fisher_small, _ = evaluate_sets(model, small)

    assert theta_nn.shape == (10, 2)
    assert np.all(np.isfinite(theta_nn))
    assert np.sqrt(np.mean((theta_nn - theta_mle) ** 2)) <= 1.0
    # summed Fisher grows with the number of data
    assert np.mean(fisher[:, 0, 0]) > 10.0 * np.mean(fisher_small[:, 0, 0])


@pytest.mark.slow
def test_fishnets_is_more_robust_than_deepsets_with_fewer_parameters(tmp_path):
    baseline = {"hidden": [32, 32], "embed_dim": 32, "global_hidden": [64, 64]}
    config = _linreg_study(
        experiment="robustness",
        data={"n_train": 400, "n_valid": 40, "n_test": 10, "n_data_train": 500, "n_data_test": 500,
              "linreg": {"cinv_p": [[0.01, 0.0], [0.0, 0.01]]}},
        models=[
            {"kind": "fishnets", "hidden": [24, 24]},
            {"kind": "deepset", **baseline},
            {"kind": "softmax", **baseline},
        ],
        robustness={"n_test": 50, "n_data": 850, "in_distribution": False},
    )
    with open_run(config, "robustness", tmp_path) as ctx:
        table = run_robustness(ctx)
    fishnets = table.value("fishnets", "mse_m_shifted")
    assert fishnets <= 0.5 * table.value("deepset", "mse_m_shifted")
    assert fishnets <= 0.8 * table.value("softmax", "mse_m_shifted")
    n_params = {r.model: r.n_params for r in table.rows}
    for label in ("deepset", "softmax"):
        assert n_params["fishnets"] <= 0.25 * n_params[label]


@pytest.mark.slow
def test_gamma_posterior_is_calibrated(tmp_path):
    config = parse_config({
        "experiment": "gamma",
        "seed": 0,
        "data": {"generator": "gamma", "n_train": 400, "n_valid": 40, "n_test": 100,
                 "n_data_train": 200, "n_data_test": 200},
        "models": [{"kind": "fishnets", "hidden": [32, 32], "activation": "swish"}],
        "training": {"epochs": 40, "batch_size": 16, "learning_rate": 1e-3,
                     "decay_milestones": [25, 35], "clip_norm": 100.0},
    })
    with open_run(config, "gamma-pit", tmp_path) as ctx:
        table, records = run_gamma_pit(ctx)
    assert records["flagged"].sum() < 50
    for name in ("mu", "scale"):
        assert table.value("fishnets", f"ks_pvalue_{name}") > 0.01


@pytest.mark.slow
def test_fishnets_aggregation_degrades_least_on_noisy_edges(tmp_path):
    config = _tiny(
        experiment="graph",
        graph={
            "graph": {"n_nodes": 300, "mean_degree": 8.0, "n_tasks": 2},
            "models": [
                {"aggregation": "fishnets", "n_layers": 2, "hidden": 16, "width": 16, "n_p": 2},
                {"aggregation": "mean", "n_layers": 2, "hidden": 16},
                {"aggregation": "softmax", "n_layers": 2, "hidden": 16},
            ],
            "training": {"max_epochs": 150, "patience": 40},
            "seeds": [0, 1],
        },
    )
    with open_run(config, "graph-ablation", tmp_path) as ctx:
        table, outcomes = run_graph_ablation(ctx)
    reference = outcomes["fishnets/noisy"]["n_params"]
    for aggregation in ("mean", "softmax"):
        assert abs(outcomes[f"{aggregation}/noisy"]["n_params"] - reference) <= 0.1 * reference
        assert table.value("fishnets", "test_roc_auc_noisy") >= table.value(aggregation, "test_roc_auc_noisy")
    assert table.value("fishnets", "degradation") <= max(0.75 * table.value("mean", "degradation"), 0.02)
