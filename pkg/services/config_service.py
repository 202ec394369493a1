"""
Experiment configuration: TOML files validated into pydantic models.

Unknown keys are rejected. Every validated config has a short stable hash
(SHA-256 of its sorted-key JSON dump) that is written into each artifact.
"""

import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import toml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from services.common import stable_hash
from services.errors import ConfigurationError
from services.simulation_service import GammaPopConfig, LinRegPrior, ToyGraphConfig

load_dotenv()

logger = logging.getLogger(__name__)

EXPERIMENTS = ("smoke", "linreg", "robustness", "gamma", "graph")


def _progress_default() -> bool:
    return os.getenv("FISHNETS_PROGRESS", "1") not in ("0", "false", "False")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainingConfig(StrictModel):
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    decay_milestones: List[int] = Field(default_factory=list)
    decay_factor: float = Field(0.5, gt=0, le=1)
    seed: int = 0
    restore_best: bool = True
    clip_norm: Optional[float] = Field(None, gt=0)
    log_every: int = Field(10, ge=1)
    progress: bool = Field(default_factory=_progress_default, exclude=True)


class LinRegConfig(StrictModel):
    mu_p: List[float] = [0.0, 0.0]
    cinv_p: List[List[float]] = [[1.0, 0.0], [0.0, 1.0]]
    theta_fid: List[float] = [0.0, 0.0]
    theta_mean: List[float] = [0.0, 0.0]
    theta_std: List[float] = [10.0, 10.0]
    x_range: Tuple[float, float] = (0.0, 10.0)
    sigma_range: Tuple[float, float] = (1.0, 10.0)

    def to_prior(self) -> LinRegPrior:
        return LinRegPrior(**self.model_dump())


class GammaConfig(StrictModel):
    mu_range: Tuple[float, float] = (0.5, 10.0)
    theta_scale_range: Tuple[float, float] = (0.1, 1.5)
    tau_range: Tuple[float, float] = (0.0, 10.0)
    amplitude: float = Field(100.0, gt=0)
    s_min: Optional[int] = Field(5, ge=0)
    t_max: float = 10.0
    min_acceptance: float = Field(1e-4, gt=0)

    def to_config(self) -> GammaPopConfig:
        return GammaPopConfig(**self.model_dump())


class DataConfig(StrictModel):
    generator: Literal["linreg", "gamma"] = "linreg"
    n_train: int = Field(1000, ge=1)
    n_valid: int = Field(200, ge=0)
    n_test: int = Field(200, ge=1)
    n_data_train: int = Field(500, ge=1)
    n_data_test: int = Field(5000, ge=1)
    seed: int = 0
    linreg: LinRegConfig = Field(default_factory=LinRegConfig)
    gamma: GammaConfig = Field(default_factory=GammaConfig)


class ModelConfig(StrictModel):
    kind: Literal["fishnets", "deepset", "softmax"] = "fishnets"
    name: Optional[str] = None
    hidden: List[int] = [50, 50, 50]
    activation: Literal["elu", "swish", "identity"] = "elu"
    embed_dim: int = Field(64, ge=1)
    global_hidden: List[int] = [128, 128, 128]
    beta_init: float = 1.0
    c: Optional[List[float]] = None
    score_scaling: bool = True
    include_prior: bool = True
    seed: int = 0

    @property
    def label(self) -> str:
        return self.name or self.kind


class RobustnessConfig(StrictModel):
    n_test: int = Field(200, ge=1)
    n_data: int = Field(850, ge=1)
    in_distribution: bool = True


class PitConfig(StrictModel):
    min_mass: float = Field(1e-6, gt=0)


class GraphConfig(StrictModel):
    n_nodes: int = Field(600, ge=1)
    mean_degree: float = Field(8.0, ge=0)
    n_tasks: int = Field(4, ge=1)
    latent_range: Tuple[float, float] = (0.05, 0.95)
    train_fraction: float = Field(0.6, gt=0, lt=1)
    valid_fraction: float = Field(0.2, gt=0, lt=1)
    isolated_warn_fraction: float = 0.05

    def to_config(self, noisy: bool) -> ToyGraphConfig:
        return ToyGraphConfig(noisy=noisy, **self.model_dump())


class GraphModelConfig(StrictModel):
    aggregation: Literal["mean", "softmax", "fishnets"]
    n_layers: int = Field(3, ge=0)
    hidden: int = Field(32, ge=1)
    width: Optional[int] = Field(None, ge=1)
    n_p: int = Field(4, ge=0)
    activation: Literal["elu", "swish", "identity"] = "swish"
    residual: bool = True


class GraphTrainingConfig(StrictModel):
    max_epochs: int = Field(300, ge=1)
    patience: int = Field(50, ge=0)
    learning_rate: float = Field(5e-3, gt=0)
    log_every: int = Field(25, ge=1)
    progress: bool = Field(default_factory=_progress_default, exclude=True)


class GraphExperimentConfig(StrictModel):
    graph: GraphConfig = Field(default_factory=GraphConfig)
    models: List[GraphModelConfig] = Field(
        default_factory=lambda: [
            GraphModelConfig(aggregation="fishnets", width=32),
            GraphModelConfig(aggregation="mean"),
            GraphModelConfig(aggregation="softmax"),
        ]
    )
    training: GraphTrainingConfig = Field(default_factory=GraphTrainingConfig)
    seeds: List[int] = [0, 1, 2]
    settings: List[Literal["noisefree", "noisy"]] = ["noisefree", "noisy"]
    match_tolerance: float = Field(0.1, gt=0)

    @model_validator(mode="after")
    def _one_reference(self):
        fishnets = [m for m in self.models if m.aggregation == "fishnets"]
        if any(m.width is None for m in fishnets):
            raise ValueError("fishnets graph models need an explicit width")
        if any(m.n_p < 1 for m in fishnets):
            raise ValueError("fishnets graph models need n_p >= 1")
        if any(m.width is None for m in self.models) and not fishnets:
            raise ValueError("width matching needs a fishnets reference model")
        return self


class ExperimentConfig(StrictModel):
    experiment: Literal["smoke", "linreg", "robustness", "gamma", "graph"] = "smoke"
    seed: int = 0
    output_dir: Optional[str] = None
    data: DataConfig = Field(default_factory=DataConfig)
    models: List[ModelConfig] = Field(default_factory=lambda: [ModelConfig()])
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    robustness: RobustnessConfig = Field(default_factory=RobustnessConfig)
    pit: PitConfig = Field(default_factory=PitConfig)
    graph: GraphExperimentConfig = Field(default_factory=GraphExperimentConfig)

    @model_validator(mode="after")
    def _unique_labels(self):
        labels = [m.label for m in self.models]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise ValueError(f"model labels must be unique, repeated: {duplicates}")
        return self


def parse_config(payload: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid experiment config: {exc}") from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        payload = toml.load(path)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Config file not found: {path}") from exc
    except toml.TomlDecodeError as exc:
        raise ConfigurationError(f"Config file {path} is not valid TOML: {exc}") from exc
    config = parse_config(payload)
    logger.info("Loaded %s config from %s (hash %s)", config.experiment, path, config_hash(config))
    return config


def config_hash(config: BaseModel) -> str:
    return stable_hash(config.model_dump(mode="json"))


def run_directory(config: ExperimentConfig, root: Optional[Union[str, Path]] = None) -> Path:
    """output_dir if set, else <FISHNETS_RUN_ROOT>/<experiment>-<hash>."""
    if config.output_dir:
        return Path(config.output_dir)
    root = Path(root or os.getenv("FISHNETS_RUN_ROOT", "runs"))
    return root / f"{config.experiment}-{config_hash(config)}"
