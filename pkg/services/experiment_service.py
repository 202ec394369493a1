"""
Experiment runners behind the CLI.

A run lives in one directory holding the dataset banks, checkpoints, raw
result arrays and a SQLite database of Run/ResultRow/Artifact records.
Runners return a ResultTable and also persist it to that database.

  run_linreg_saturation  fishnets vs. the analytic MLE on larger test sets
  run_robustness         fishnets / deepset / softmax under a shifted test distribution
  run_gamma_pit          PIT calibration of the Gaussian-approximation posterior
  run_graph_ablation     mean / softmax / fishnets neighbourhood aggregation on toy graphs
"""

import contextlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from sqlalchemy.orm import Session
from tqdm import tqdm

from db.session import session_factory
from models.run import Run
from models.set_dataset import SetDataset
from services import baseline_service, fishnets_service, graph_service
from services.common import atomic_write_json, derive_seeds
from services.config_service import DataConfig, ExperimentConfig, ModelConfig, config_hash, run_directory
from services.errors import ConfigurationError, NoResultsError
from services.metrics_service import MIN_KS_SAMPLES, gaussian_pit, ks_test
from services.nn_service import TrainingHistory, forward
from services.report_service import (
    ResultTable,
    finish_run,
    record_table,
    register_artifact,
    start_run,
)
from services.simulation_service import (
    LinRegPrior,
    TEST_N_SUPPORT,
    generate_toy_graph,
    linreg_datum_scores,
    linreg_mle_batch,
    remeasure_graph,
    simulate_gamma_population,
    simulate_linreg,
    simulate_robustness_test,
)
from services.storage_service import (
    bank_config_hash,
    checkpoint_param_count,
    load_checkpoint,
    load_dataset_bank,
    save_arrays,
    save_checkpoint,
    save_dataset_bank,
    save_graph,
    with_ext,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
PARAMETER_NAMES = {"linreg": ("m", "b"), "gamma": ("mu", "scale")}
SLICE_ROWS = 500
INFO_EQUALITY_SETS = 2000
INFO_EQUALITY_N_DATA = 100
VANISHING_PRIOR = 1e-8


@dataclass
class RunContext:
    config: ExperimentConfig
    run_dir: Path
    config_hash: str
    db: Session
    run: Run

    def artifact(self, kind: str, name: str, path: Path) -> None:
        register_artifact(self.db, self.run, kind, name, path)

    @property
    def parameter_names(self) -> Tuple[str, ...]:
        return PARAMETER_NAMES[self.config.data.generator]


@contextlib.contextmanager
def open_run(config: ExperimentConfig, command: str, run_dir: Optional[Path] = None) -> Iterator[RunContext]:
    """Create the run directory and a Run record; mark it Completed or Failed on exit."""
    run_dir = Path(run_dir) if run_dir else run_directory(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    atomic_write_json(run_dir / "config.json", {"config_hash": digest, "config": config.model_dump(mode="json")})
    db = session_factory(run_dir)()
    run = start_run(db, command, config.experiment, digest, config.seed)
    logger.info("Run %d (%s/%s) in %s", run.id, command, config.experiment, run_dir)
    try:
        yield RunContext(config, run_dir, digest, db, run)
        finish_run(db, run, "Completed")
    except Exception as exc:
        db.rollback()
        finish_run(db, run, "Failed", error=f"{type(exc).__name__}: {exc}")
        raise
    finally:
        db.close()


# --- dataset banks --------------------------------------------------------------


def simulate_sets(config: ExperimentConfig, split: str, n_sets: int, n_data: int) -> List[SetDataset]:
    data = config.data
    split_seed = derive_seeds(data.seed, len(SPLITS))[SPLITS.index(split)]
    seeds = derive_seeds(split_seed, n_sets)
    prior = data.linreg.to_prior() if data.generator == "linreg" else None
    gamma = data.gamma.to_config() if data.generator == "gamma" else None
    sets = []
    for seed in tqdm(seeds, desc=f"simulate {split}", disable=not config.training.progress):
        if prior is not None:
            sets.append(simulate_linreg(prior, n_data, seed))
        else:
            sets.append(simulate_gamma_population(gamma, None, n_data, seed))
    return sets


def simulate_banks(ctx: RunContext) -> Dict[str, List[SetDataset]]:
    data = ctx.config.data
    sizes = {
        "train": (data.n_train, data.n_data_train),
        "valid": (data.n_valid, data.n_data_train),
        "test": (data.n_test, data.n_data_test),
    }
    banks = {}
    for split, (n_sets, n_data) in sizes.items():
        if n_sets == 0:
            banks[split] = []
            continue
        banks[split] = simulate_sets(ctx.config, split, n_sets, n_data)
        directory = save_dataset_bank(banks[split], ctx.run_dir / "datasets" / split, ctx.config_hash)
        ctx.artifact("dataset-bank", split, directory)
    return banks


def ensure_banks(ctx: RunContext) -> Dict[str, List[SetDataset]]:
    """
    Reuse the banks already in the run directory, simulating them when absent.
    Banks written under a different configuration raise ConfigurationError
    rather than being mixed with this run's models.
    """
    try:
        banks = {s: load_dataset_bank(ctx.run_dir / "datasets" / s) for s in ("train", "test")}
    except NoResultsError:
        return simulate_banks(ctx)
    for split in ("train", "test"):
        recorded = bank_config_hash(ctx.run_dir / "datasets" / split)
        if recorded != ctx.config_hash:
            raise ConfigurationError(
                f"Dataset bank {split} in {ctx.run_dir} was written by config {recorded}, "
                f"not {ctx.config_hash}; use a fresh --run-dir"
            )
    try:
        banks["valid"] = load_dataset_bank(ctx.run_dir / "datasets" / "valid")
    except NoResultsError:
        banks["valid"] = []
    return banks


# --- contenders --------------------------------------------------------------------


def build_contender(model_cfg: ModelConfig, train_sets: List[SetDataset], data: Optional[DataConfig] = None):
    input_dim, n_p = train_sets[0].feature_dim, train_sets[0].theta.shape[0]
    prior = data.linreg.to_prior() if data is not None and data.generator == "linreg" else None
    include_prior = model_cfg.kind == "fishnets" and model_cfg.include_prior and prior is not None
    c = model_cfg.c
    if c is None and include_prior:
        c = prior.theta_fid.tolist()
    if model_cfg.kind == "fishnets":
        model = fishnets_service.build_fishnets_model(
            input_dim, n_p, model_cfg.hidden, model_cfg.activation, model_cfg.seed, c=c
        )
        model.input_shift, model.input_scale = fishnets_service.fit_input_scaling(train_sets)
        if model_cfg.score_scaling:
            model.score_scale = fishnets_service.fit_score_scaling(train_sets)
        if include_prior:
            # the Gaussian prior enters the aggregate once, as in the analytic MLE
            model.prior_score, model.prior_fisher = prior.t_0, prior.cinv_p.copy()
        return model
    model = baseline_service.build_deepset_model(
        input_dim,
        n_p,
        model_cfg.hidden,
        model_cfg.embed_dim,
        model_cfg.global_hidden,
        model_cfg.activation,
        "mean" if model_cfg.kind == "deepset" else "softmax",
        model_cfg.seed,
        beta_init=model_cfg.beta_init,
    )
    model.input_shift, model.input_scale = fishnets_service.fit_input_scaling(train_sets)
    model.theta_shift, model.theta_scale = baseline_service.fit_theta_scaling(train_sets)
    return model


def train_contender(model, train_sets, valid_sets, training) -> TrainingHistory:
    if isinstance(model, fishnets_service.FishnetsModel):
        _, history = fishnets_service.train(model, train_sets, training, valid_sets or None)
    else:
        _, history = baseline_service.mse_train(model, train_sets, training, valid_sets or None)
    return history


def _checkpoint_path(ctx: RunContext, label: str) -> Path:
    return ctx.run_dir / "models" / label


def train_models(ctx: RunContext, banks: Dict[str, List[SetDataset]]) -> Tuple[Dict[str, object], ResultTable]:
    table = ResultTable("train", ctx.config_hash)
    trained = {}
    for model_cfg in ctx.config.models:
        label = model_cfg.label
        model = build_contender(model_cfg, banks["train"], ctx.config.data)
        logger.info("Training %s (%d parameters) on %d sets", label, model.n_params, len(banks["train"]))
        history = train_contender(model, banks["train"], banks["valid"], ctx.config.training)
        path = save_checkpoint(model, _checkpoint_path(ctx, label), ctx.config_hash,
                               extra={"best_epoch": history.best_epoch})
        ctx.artifact("checkpoint", label, path)
        history_path = save_arrays(
            ctx.run_dir / "histories" / label,
            {k: np.asarray(getattr(history, k)) for k in ("train_loss", "valid_loss", "learning_rate")},
            {"model": label, "best_epoch": history.best_epoch},
            ctx.config_hash,
        )
        ctx.artifact("history", label, history_path)
        n_params = checkpoint_param_count(path)
        if history.train_loss:
            table.add(label, n_params, "train_loss_final", history.train_loss[-1], seed=ctx.config.training.seed)
        if history.valid_loss:
            table.add(label, n_params, "valid_loss_initial", history.valid_loss[0], seed=ctx.config.training.seed)
            table.add(label, n_params, "valid_loss_best", min(history.valid_loss), seed=ctx.config.training.seed)
        trained[label] = model
    record_table(ctx.db, ctx.run, table)
    return trained, table


def ensure_models(ctx: RunContext, banks: Dict[str, List[SetDataset]]) -> Dict[str, object]:
    models = {}
    for model_cfg in ctx.config.models:
        path = with_ext(_checkpoint_path(ctx, model_cfg.label), ".npz")
        if not path.exists():
            return train_models(ctx, banks)[0]
        models[model_cfg.label] = load_checkpoint(path)
    return models


def _n_params(ctx: RunContext, label: str) -> int:
    return checkpoint_param_count(_checkpoint_path(ctx, label))


def _first_fishnets(ctx: RunContext, models: Dict[str, object]) -> Tuple[str, fishnets_service.FishnetsModel]:
    for label, model in models.items():
        if isinstance(model, fishnets_service.FishnetsModel):
            return label, model
    raise ConfigurationError("This experiment needs a fishnets model in [[models]]")


def predict(model, sets: List[SetDataset]) -> np.ndarray:
    if isinstance(model, fishnets_service.FishnetsModel):
        return fishnets_service.evaluate_sets(model, sets)[2]
    return baseline_service.predict_sets(model, sets)


# --- linear-regression saturation ------------------------------------------------


def information_equality(prior: LinRegPrior, theta: np.ndarray, n_sets: int, n_data: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Empirical covariance of analytic MLEs at fixed theta and the mean inverse
    Fisher. The Gaussian prior is switched off so the MLE is unbiased.
    """
    prior = replace(prior, cinv_p=VANISHING_PRIOR * np.eye(2))
    sets = [simulate_linreg(prior, n_data, s, theta=theta) for s in derive_seeds(seed, n_sets)]
    estimates, inverse_fishers = linreg_mle_batch(sets, prior)
    return np.cov(estimates, rowvar=False), inverse_fishers.mean(axis=0)


def score_slices(model: fishnets_service.FishnetsModel, dataset: SetDataset, prior: LinRegPrior, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Sampled (input, predicted per-datum score, analytic per-datum score) rows."""
    idx = np.sort(rng.choice(dataset.n_data, size=min(SLICE_ROWS, dataset.n_data), replace=False))
    rows = dataset.data[idx]
    predicted = model.score_scale * forward(model.score_net, (rows - model.input_shift) / model.input_scale)
    return {"inputs": rows, "predicted_score": predicted, "analytic_score": linreg_datum_scores(rows, prior)}


def run_linreg_saturation(
    ctx: RunContext,
    model: fishnets_service.FishnetsModel,
    test_sets: List[SetDataset],
    label: str = "fishnets",
) -> Tuple[ResultTable, Dict[str, np.ndarray]]:
    prior = ctx.config.data.linreg.to_prior()
    theta = np.stack([s.theta for s in test_sets])
    _, fisher_nn, theta_nn = fishnets_service.evaluate_sets(model, test_sets)
    theta_mle, _ = linreg_mle_batch(test_sets, prior)
    records = {
        "theta_true": theta,
        "theta_nn": theta_nn,
        "theta_mle": theta_mle,
        "residual_truth": theta_nn - theta,
        "residual_mle": theta_nn - theta_mle,
        "fisher_nn": fisher_nn,
    }
    records.update(score_slices(model, test_sets[0], prior, np.random.default_rng(ctx.config.seed)))

    table = ResultTable("linreg-saturation", ctx.config_hash)
    n_params = _n_params(ctx, label)
    for j, name in enumerate(ctx.parameter_names):
        vs_mle = records["residual_mle"][:, j]
        vs_truth = records["residual_truth"][:, j]
        table.add(label, n_params, f"rmse_vs_mle_{name}", np.sqrt(np.mean(vs_mle ** 2)), np.std(vs_mle))
        table.add(label, n_params, f"bias_vs_mle_{name}", np.mean(vs_mle), np.std(vs_mle) / np.sqrt(len(vs_mle)))
        table.add(label, n_params, f"rmse_vs_truth_{name}", np.sqrt(np.mean(vs_truth ** 2)), np.std(vs_truth))
        mle_err = theta_mle[:, j] - theta[:, j]
        table.add("analytic-mle", 0, f"rmse_vs_truth_{name}", np.sqrt(np.mean(mle_err ** 2)), np.std(mle_err))

    cov, inv_fisher = information_equality(
        prior, prior.theta_mean + 1.0, INFO_EQUALITY_SETS, INFO_EQUALITY_N_DATA, ctx.config.seed
    )
    rel = np.abs(cov - inv_fisher) / np.abs(inv_fisher)
    table.add("analytic-mle", 0, "cov_vs_inverse_fisher_max_rel", float(rel.max()))
    return table, records


def evaluate_linreg_saturation(ctx: RunContext) -> ResultTable:
    banks = ensure_banks(ctx)
    label, model = _first_fishnets(ctx, ensure_models(ctx, banks))
    table, records = run_linreg_saturation(ctx, model, banks["test"], label)
    path = save_arrays(ctx.run_dir / "results" / "linreg_saturation", records,
                       {"model": label, "n_test": len(banks["test"])}, ctx.config_hash)
    ctx.artifact("arrays", "linreg_saturation", path)
    record_table(ctx.db, ctx.run, table)
    return table


# --- robustness ---------------------------------------------------------------------


def _mse_rows(table: ResultTable, label: str, n_params: int, estimates: np.ndarray, theta: np.ndarray,
              names: Tuple[str, ...], suffix: str, seed: int) -> None:
    sq = (estimates - theta) ** 2
    for j, name in enumerate(names):
        table.add(label, n_params, f"mse_{name}_{suffix}", np.mean(sq[:, j]), np.std(sq[:, j]), seed)


def run_robustness(ctx: RunContext) -> ResultTable:
    """
    MSE per parameter for every contender on test sets drawn from the shifted
    noise/covariate distribution, plus in-distribution sanity rows. Spread is
    the standard deviation of the squared error across test sets.
    """
    config = ctx.config
    if config.data.generator != "linreg":
        raise ConfigurationError("The robustness study runs on the linreg generator")
    banks = ensure_banks(ctx)
    models = ensure_models(ctx, banks)
    prior = config.data.linreg.to_prior()
    rob = config.robustness
    seeds = derive_seeds(config.seed + 1, rob.n_test)
    shifted = [simulate_robustness_test(s, prior, rob.n_data) for s in seeds]
    theta_shifted = np.stack([s.theta for s in shifted])

    table = ResultTable("robustness", ctx.config_hash)
    names = ctx.parameter_names
    mle, _ = linreg_mle_batch(shifted, prior)
    _mse_rows(table, "analytic-mle", 0, mle, theta_shifted, names, "shifted", config.seed)
    if rob.in_distribution:
        in_dist = [simulate_linreg(prior, rob.n_data, s) for s in derive_seeds(config.seed + 2, rob.n_test)]
        theta_in = np.stack([s.theta for s in in_dist])
    for label, model in models.items():
        n_params = _n_params(ctx, label)
        _mse_rows(table, label, n_params, predict(model, shifted), theta_shifted, names, "shifted", config.seed)
        if rob.in_distribution:
            _mse_rows(table, label, n_params, predict(model, in_dist), theta_in, names, "in_distribution", config.seed)
        logger.info("Robustness %s: mse_%s_shifted=%.4f", label, names[0], table.value(label, f"mse_{names[0]}_shifted"))
    record_table(ctx.db, ctx.run, table)
    return table


# --- Gamma-model PIT ------------------------------------------------------------------


def run_gamma_pit(ctx: RunContext) -> Tuple[ResultTable, Dict[str, np.ndarray]]:
    """
    PIT of the true (mu, scale) under N(theta_hat, F_NN^-1) truncated to the
    prior box, per held-out set, and a KS test of each parameter's PIT values
    against Uniform(0, 1). Records with negligible posterior mass in the box
    are flagged and excluded.
    """
    config = ctx.config
    if config.data.generator != "gamma":
        raise ConfigurationError("The PIT study runs on the gamma generator")
    banks = ensure_banks(ctx)
    label, model = _first_fishnets(ctx, ensure_models(ctx, banks))
    test_sets = banks["test"]
    _, fisher_nn, theta_nn = fishnets_service.evaluate_sets(model, test_sets)
    theta = np.stack([s.theta for s in test_sets])
    gamma = config.data.gamma
    lower = (gamma.mu_range[0], gamma.theta_scale_range[0])
    upper = (gamma.mu_range[1], gamma.theta_scale_range[1])
    pit = gaussian_pit(theta_nn, fisher_nn, theta, lower, upper, config.pit.min_mass)

    table = ResultTable("gamma-pit", ctx.config_hash)
    n_params = _n_params(ctx, label)
    kept = pit.kept
    for j, name in enumerate(ctx.parameter_names):
        if kept.shape[0] < MIN_KS_SAMPLES:
            logger.warning("Only %d unflagged PIT records; KS test for %s skipped", kept.shape[0], name)
            statistic, p_value = float("nan"), float("nan")
        else:
            statistic, p_value = ks_test(kept[:, j])
        table.add(label, n_params, f"ks_statistic_{name}", statistic, seed=config.seed)
        table.add(label, n_params, f"ks_pvalue_{name}", p_value, seed=config.seed)
        logger.info("PIT %s: KS=%.4f p=%.3f over %d sets", name, statistic, p_value, kept.shape[0])
    table.add(label, n_params, "pit_flagged", pit.n_flagged, seed=config.seed)
    acceptance = [s.meta.get("acceptance_rate", 1.0) for s in test_sets]
    table.add(label, n_params, "acceptance_rate", float(np.mean(acceptance)), float(np.std(acceptance)), config.seed)

    records = {"pit": pit.values, "flagged": pit.flagged, "theta_true": theta, "theta_nn": theta_nn}
    path = save_arrays(ctx.run_dir / "results" / "gamma_pit", records, {"model": label}, ctx.config_hash)
    ctx.artifact("arrays", "gamma_pit", path)
    record_table(ctx.db, ctx.run, table)
    return table, records


def evaluate_experiment(ctx: RunContext) -> ResultTable:
    experiment = ctx.config.experiment
    if experiment in ("smoke", "linreg"):
        return evaluate_linreg_saturation(ctx)
    if experiment == "robustness":
        return run_robustness(ctx)
    if experiment == "gamma":
        return run_gamma_pit(ctx)[0]
    raise ConfigurationError("Graph experiments are evaluated by the graph-ablation command")


# --- graph ablation ----------------------------------------------------------------------


def _graph_widths(ctx: RunContext, d_node: int, d_edge: int, n_tasks: int) -> Dict[str, Tuple[int, int]]:
    """(width, parameter count) per contender; unset widths are matched to the fishnets model."""
    gcfg = ctx.config.graph
    reference = None
    for m in gcfg.models:
        if m.aggregation == "fishnets":
            reference = graph_service.count_gnn_params(
                "fishnets", d_node, d_edge, m.hidden, m.width, m.n_layers, n_tasks, m.n_p
            )
            break
    widths = {}
    for m in gcfg.models:
        width = m.width or graph_service.match_width(
            m.aggregation, reference, d_node, d_edge, m.hidden, m.n_layers, n_tasks, m.n_p
        )
        count = graph_service.count_gnn_params(m.aggregation, d_node, d_edge, m.hidden, width, m.n_layers, n_tasks, m.n_p)
        if reference and abs(count - reference) > gcfg.match_tolerance * reference:
            logger.warning("%s has %d parameters, %.0f%% away from the fishnets model's %d",
                           m.aggregation, count, 100 * abs(count - reference) / reference, reference)
        widths[m.aggregation] = (width, count)
    return widths


def _epochs_to_mean_best(ctx: RunContext, table: ResultTable, outcomes: Dict[str, Dict[str, list]],
                         histories: Dict[str, np.ndarray]) -> None:
    """
    For every setting and seed, the first epoch at which each contender's
    validation ROC-AUC reaches the best one the mean-aggregation model
    achieved on the same graph. Runs that never get there are logged only.
    """
    gcfg = ctx.config.graph
    if not any(m.aggregation == "mean" for m in gcfg.models):
        return
    for setting in gcfg.settings:
        for seed in gcfg.seeds:
            target = float(np.max(histories[f"mean_{setting}_{seed}_valid"]))
            for m in gcfg.models:
                n_params = outcomes[f"{m.aggregation}/{setting}"]["n_params"]
                epoch = graph_service.epochs_to_reach(histories[f"{m.aggregation}_{setting}_{seed}_valid"], target)
                if epoch is None:
                    logger.info("%s/%s seed %d never reached the mean model's best validation ROC-AUC %.4f",
                                m.aggregation, setting, seed, target)
                    continue
                table.add(m.aggregation, n_params, f"epochs_to_mean_best_{setting}", epoch, seed=seed)


def run_graph_ablation(ctx: RunContext) -> Tuple[ResultTable, Dict[str, Dict[str, list]]]:
    """
    Train every aggregation on noise-free and noisy toy graphs for each seed.
    The test metric is the test ROC-AUC at the best validation epoch (noisy
    graphs are re-measured with the shifted coin-toss distribution for
    testing), averaged over seeds; spread is the mean last-ten-epoch std.
    """
    gcfg = ctx.config.graph
    table = ResultTable("graph-ablation", ctx.config_hash)
    outcomes: Dict[str, Dict[str, list]] = {}
    histories: Dict[str, np.ndarray] = {}

    for setting in gcfg.settings:
        for seed in gcfg.seeds:
            graph = generate_toy_graph(gcfg.graph.to_config(noisy=setting == "noisy"), seed)
            test_graph = remeasure_graph(graph, derive_seeds(seed, 1)[0], TEST_N_SUPPORT)
            path = save_graph(graph, ctx.run_dir / "graphs" / f"{setting}_{seed}", ctx.config_hash)
            ctx.artifact("graph", f"{setting}_{seed}", path)
            widths = _graph_widths(ctx, graph.node_features.shape[1], graph.edge_features.shape[1], graph.n_tasks)
            for m in gcfg.models:
                width, count = widths[m.aggregation]
                model = graph_service.build_gnn_model(
                    m.aggregation, graph.node_features.shape[1], graph.edge_features.shape[1], m.hidden,
                    width, m.n_layers, graph.n_tasks, m.n_p, m.activation, seed, m.residual,
                )
                model.node_shift, model.node_scale = graph_service.fit_node_scaling(graph)
                _, history = graph_service.gnn_train(model, graph, gcfg.training, test_graph)
                key = f"{m.aggregation}/{setting}"
                entry = outcomes.setdefault(key, {"best_test": [], "spread": [], "best_epoch": [], "n_params": count,
                                                  "best_valid": []})
                entry["best_test"].append(history.best_test_metric)
                entry["best_valid"].append(history.best_valid_metric)
                entry["spread"].append(history.final_window_std())
                entry["best_epoch"].append(history.best_epoch)
                histories[f"{m.aggregation}_{setting}_{seed}_test"] = np.asarray(history.test_metric)
                histories[f"{m.aggregation}_{setting}_{seed}_valid"] = np.asarray(history.valid_metric)
                if seed == gcfg.seeds[-1]:
                    ckpt = save_checkpoint(model, ctx.run_dir / "models" / f"gnn_{m.aggregation}_{setting}",
                                           ctx.config_hash, extra={"seed": seed, "setting": setting})
                    ctx.artifact("checkpoint", f"gnn_{m.aggregation}_{setting}", ckpt)

    for key, entry in outcomes.items():
        aggregation, setting = key.split("/")
        n_params = entry["n_params"]
        table.add(aggregation, n_params, f"test_roc_auc_{setting}", np.mean(entry["best_test"]),
                  np.mean(entry["spread"]), ctx.config.seed)
        table.add(aggregation, n_params, f"valid_roc_auc_{setting}", np.mean(entry["best_valid"]),
                  np.std(entry["best_valid"]), ctx.config.seed)
        table.add(aggregation, n_params, f"best_epoch_{setting}", np.mean(entry["best_epoch"]),
                  np.std(entry["best_epoch"]), ctx.config.seed)
    for m in gcfg.models:
        clean, noisy = outcomes.get(f"{m.aggregation}/noisefree"), outcomes.get(f"{m.aggregation}/noisy")
        if clean and noisy:
            table.add(m.aggregation, clean["n_params"], "degradation",
                      np.mean(clean["best_test"]) - np.mean(noisy["best_test"]), seed=ctx.config.seed)
    _epochs_to_mean_best(ctx, table, outcomes, histories)

    path = save_arrays(ctx.run_dir / "results" / "graph_histories", histories,
                       {"seeds": gcfg.seeds, "settings": gcfg.settings}, ctx.config_hash)
    ctx.artifact("arrays", "graph_histories", path)
    record_table(ctx.db, ctx.run, table)
    return table, outcomes


def simulate_experiment(ctx: RunContext) -> int:
    """Write the experiment's inputs; returns the number of records written."""
    if ctx.config.experiment == "graph":
        gcfg = ctx.config.graph
        count = 0
        for setting in gcfg.settings:
            for seed in gcfg.seeds:
                graph = generate_toy_graph(gcfg.graph.to_config(noisy=setting == "noisy"), seed)
                path = save_graph(graph, ctx.run_dir / "graphs" / f"{setting}_{seed}", ctx.config_hash)
                ctx.artifact("graph", f"{setting}_{seed}", path)
                count += 1
        return count
    return sum(len(v) for v in simulate_banks(ctx).values())
