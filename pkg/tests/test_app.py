import json

import pandas as pd
import pytest
from click.testing import CliRunner

from app import cli, exit_code_for
from services.errors import (
    ConfigurationError,
    EmptyAggregationError,
    FactorizationError,
    NoResultsError,
    TrainingDivergenceError,
)

TINY_CONFIG = """
experiment = "smoke"
seed = 0

[data]
n_train = 8
n_valid = 4
n_test = 8
n_data_train = 20
n_data_test = 30

[[models]]
kind = "fishnets"
hidden = [8]

[training]
epochs = 2
batch_size = 4
"""


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.mark.parametrize(
    "exc, code",
    [
        (ConfigurationError("x"), 2),
        (NoResultsError("x"), 3),
        (FactorizationError("x"), 4),
        (TrainingDivergenceError("x", epoch=1), 4),
        (EmptyAggregationError("x"), 5),
        (KeyError("x"), 1),
    ],
)
def test_exit_codes(exc, code):
    assert exit_code_for(exc) == code


def test_report_on_empty_directory(runner, tmp_path):
    result = runner.invoke(cli, ["report", str(tmp_path)])
    assert result.exit_code == 3
    assert json.loads(result.stderr.strip().splitlines()[-1])["error"] == "no-results"


def test_invalid_config_exits_with_config_code(runner, tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[training]\nepochz = 3\n", encoding="utf-8")
    result = runner.invoke(cli, ["simulate", "--config", str(path)])
    assert result.exit_code == 2
    assert '"error": "config"' in result.stderr


def test_unknown_command(runner):
    assert runner.invoke(cli, ["fly"]).exit_code == 2


def test_graph_models_are_not_trained_by_train(runner, tmp_path):
    path = tmp_path / "graph.toml"
    path.write_text('experiment = "graph"\n', encoding="utf-8")
    result = runner.invoke(cli, ["train", "--config", str(path), "--run-dir", str(tmp_path / "run")])
    assert result.exit_code == 2


def test_simulate_train_eval_report(runner, tiny_config, tmp_path):
    run_dir = str(tmp_path / "run")
    for command in ("simulate", "train", "eval"):
        result = runner.invoke(cli, [command, "--config", str(tiny_config), "--run-dir", run_dir])
        assert result.exit_code == 0, result.output

    result = runner.invoke(cli, ["report", run_dir])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(tmp_path / "run" / "results.csv")
    assert list(frame.columns) == ["experiment", "model", "n_params", "metric", "value", "spread", "seed"]
    assert {"train", "linreg-saturation"} <= set(frame["experiment"])
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["n_rows"] == len(frame)


def test_simulate_twice_writes_identical_blobs(runner, tiny_config, tmp_path):
    for name in ("a", "b"):
        result = runner.invoke(cli, ["simulate", "--config", str(tiny_config), "--run-dir", str(tmp_path / name)])
        assert result.exit_code == 0, result.output
    blobs = sorted((tmp_path / "a" / "datasets").rglob("*.npy"))
    assert len(blobs) == 20
    for blob in blobs:
        twin = tmp_path / "b" / blob.relative_to(tmp_path / "a")
        assert blob.read_bytes() == twin.read_bytes()
