"""
Command-line entry point for the fishnets experiments.

Every subcommand except `report` reads a TOML experiment config and writes
into that config's run directory (`<FISHNETS_RUN_ROOT>/<experiment>-<hash>`
unless `output_dir` or --run-dir says otherwise). `report` turns the run
database into results.csv and summary.json.
"""

import functools
import json
import logging
import os
import sys

import click
from dotenv import load_dotenv

from services import experiment_service
from services.config_service import load_config
from services.errors import ConfigurationError, FishnetsError
from services.report_service import write_report

load_dotenv()

logger = logging.getLogger("fishnets")

NUMERICAL_CATEGORIES = {"factorization", "ill-conditioned-fisher", "training-divergence", "infeasible-censorship"}


def exit_code_for(exc: BaseException) -> int:
    if not isinstance(exc, FishnetsError):
        return 1
    if exc.category == "config":
        return 2
    if exc.category == "no-results":
        return 3
    if exc.category in NUMERICAL_CATEGORIES:
        return 4
    return 5


def _fail(exc: BaseException) -> None:
    category = getattr(exc, "category", "unexpected")
    if isinstance(exc, FishnetsError):
        logger.error("%s: %s", category, exc)
    else:
        logger.exception("Unexpected failure")
    click.echo(json.dumps({"error": category, "message": str(exc)}), err=True)
    sys.exit(exit_code_for(exc))


def guarded(command):
    """Turn exceptions into a JSON error line on stderr and a category exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:
            _fail(exc)

    return wrapper


def _print_table(table) -> None:
    if table.rows:
        click.echo(table.to_frame().to_string(index=False))


config_option = click.option(
    "--config", "config_path", required=True, type=click.Path(dir_okay=False), help="TOML experiment config."
)
run_dir_option = click.option("--run-dir", type=click.Path(file_okay=False), default=None,
                              help="Override the run directory.")


@click.group()
@click.option("--log-level", default=None, help="Overrides FISHNETS_LOG_LEVEL.")
def cli(log_level):
    """Fishnets: information-optimal set and graph aggregation experiments."""
    level = (log_level or os.getenv("FISHNETS_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@run_dir_option
@guarded
def simulate(config_path, run_dir):
    """Simulate the dataset banks (or toy graphs) for an experiment."""
    config = load_config(config_path)
    with experiment_service.open_run(config, "simulate", run_dir) as ctx:
        n_records = experiment_service.simulate_experiment(ctx)
    click.echo(f"Wrote {n_records} records to {ctx.run_dir}")


@cli.command()
@config_option
@run_dir_option
@guarded
def train(config_path, run_dir):
    """Train every model listed in the config on the simulated banks."""
    config = load_config(config_path)
    if config.experiment == "graph":
        raise ConfigurationError("Graph models are trained by the graph-ablation command")
    with experiment_service.open_run(config, "train", run_dir) as ctx:
        banks = experiment_service.ensure_banks(ctx)
        _, table = experiment_service.train_models(ctx, banks)
    _print_table(table)


@cli.command(name="eval")
@config_option
@run_dir_option
@guarded
def evaluate(config_path, run_dir):
    """Evaluate trained models with the experiment's own study."""
    config = load_config(config_path)
    with experiment_service.open_run(config, "eval", run_dir) as ctx:
        table = experiment_service.evaluate_experiment(ctx)
    _print_table(table)


@cli.command()
@config_option
@run_dir_option
@guarded
def robustness(config_path, run_dir):
    """MSE of every contender under the shifted noise/covariate distribution."""
    config = load_config(config_path)
    with experiment_service.open_run(config, "robustness", run_dir) as ctx:
        table = experiment_service.run_robustness(ctx)
    _print_table(table)


@cli.command(name="gamma-pit")
@config_option
@run_dir_option
@guarded
def gamma_pit(config_path, run_dir):
    """PIT calibration and KS tests on the censored Gamma population model."""
    config = load_config(config_path)
    with experiment_service.open_run(config, "gamma-pit", run_dir) as ctx:
        table, _ = experiment_service.run_gamma_pit(ctx)
    _print_table(table)


@cli.command(name="graph-ablation")
@config_option
@run_dir_option
@guarded
def graph_ablation(config_path, run_dir):
    """Mean, softmax and fishnets aggregation on noise-free and noisy toy graphs."""
    config = load_config(config_path)
    with experiment_service.open_run(config, "graph-ablation", run_dir) as ctx:
        table, _ = experiment_service.run_graph_ablation(ctx)
    _print_table(table)


@cli.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@guarded
def report(run_dir):
    """Write results.csv and summary.json for a run directory."""
    summary = write_report(run_dir)
    click.echo(f"Wrote {summary['n_rows']} rows to {os.path.join(run_dir, 'results.csv')}")


if __name__ == "__main__":
    cli()
