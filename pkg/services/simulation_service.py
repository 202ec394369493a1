"""
Generative simulators and analytic oracles.

- Linear regression y = m x + b + eps, eps ~ N(0, sigma), rows (y, x, sigma^2),
  with the exact score and Fisher about a fiducial point and the resulting
  one-step MLE.
- Robustness test sets: sigma from a shifted exponential truncated above,
  x from a narrower uniform.
- Gamma population model with optional censorship of low counts.
- Binomial noisy-edge measurements and a synthetic edge-weighted graph for
  node classification.

Every simulator is a pure function of (config, theta, seed).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from models.graph import Graph
from models.set_dataset import SetDataset
from services.common import make_rng
from services.errors import (
    ConfigurationError,
    InfeasibleCensorshipError,
    InputRangeError,
    InvalidNoiseError,
)
from services.fishnets_service import FisherMatrix, factor_spd, mle_estimate

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]

ROBUST_N_DATA = 850
ROBUST_SIGMA_LOC = 3.5
ROBUST_SIGMA_MAX = 10.0
ROBUST_SIGMA_RATE = 1.0
ROBUST_X_RANGE = (0.0, 3.0)

TRAIN_N_SUPPORT: Tuple[Tuple[int, int], ...] = ((20, 200),)
TEST_N_SUPPORT: Tuple[Tuple[int, int], ...] = ((20, 50), (170, 200))
N_FEATURE_SCALE = 200.0


def _check_interval(name: str, interval: Sequence[float], positive: bool = False) -> Interval:
    lo, hi = float(interval[0]), float(interval[1])
    if lo > hi:
        raise ConfigurationError(f"{name} has lower bound {lo} above upper bound {hi}")
    if positive and lo <= 0:
        raise ConfigurationError(f"{name} must be strictly positive, got {lo}")
    return lo, hi


@dataclass
class LinRegPrior:
    """
    mu_p / cinv_p form the Gaussian prior folded into the score and Fisher
    (t_0 = cinv_p (mu_p - theta_fid), cinv_p added to F). theta_mean /
    theta_std describe the wide prior that (m, b) are drawn from.
    """

    mu_p: np.ndarray = field(default_factory=lambda: np.zeros(2))
    cinv_p: np.ndarray = field(default_factory=lambda: np.eye(2))
    theta_fid: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta_std: np.ndarray = field(default_factory=lambda: np.full(2, 10.0))
    x_range: Interval = (0.0, 10.0)
    sigma_range: Interval = (1.0, 10.0)

    def __post_init__(self) -> None:
        self.mu_p = np.asarray(self.mu_p, dtype=np.float64).reshape(2)
        self.cinv_p = np.asarray(self.cinv_p, dtype=np.float64).reshape(2, 2)
        self.theta_fid = np.asarray(self.theta_fid, dtype=np.float64).reshape(2)
        self.theta_mean = np.asarray(self.theta_mean, dtype=np.float64).reshape(2)
        self.theta_std = np.asarray(self.theta_std, dtype=np.float64).reshape(2)
        if not np.allclose(self.cinv_p, self.cinv_p.T):
            raise ConfigurationError("cinv_p must be symmetric")
        try:
            np.linalg.cholesky(self.cinv_p)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("cinv_p must be positive definite") from exc
        self.x_range = _check_interval("x_range", self.x_range)
        self.sigma_range = _check_interval("sigma_range", self.sigma_range, positive=True)

    @property
    def t_0(self) -> np.ndarray:
        return self.cinv_p @ (self.mu_p - self.theta_fid)


@dataclass
class GammaPopConfig:
    mu_range: Interval = (0.5, 10.0)
    theta_scale_range: Interval = (0.1, 1.5)
    tau_range: Interval = (0.0, 10.0)
    amplitude: float = 100.0
    s_min: Optional[int] = 5
    t_max: float = 10.0
    min_acceptance: float = 1e-4

    def __post_init__(self) -> None:
        self.mu_range = _check_interval("mu_range", self.mu_range, positive=True)
        self.theta_scale_range = _check_interval("theta_scale_range", self.theta_scale_range, positive=True)
        self.tau_range = _check_interval("tau_range", self.tau_range)
        if self.amplitude <= 0:
            raise ConfigurationError("amplitude must be positive")
        if self.tau_range[1] > self.t_max:
            raise ConfigurationError("tau_range must lie within [0, t_max]")
        if self.s_min is not None and self.s_min < 0:
            raise ConfigurationError("s_min must be a nonnegative integer")

    @property
    def censored(self) -> bool:
        return bool(self.s_min)


@dataclass
class ToyGraphConfig:
    n_nodes: int = 600
    mean_degree: float = 8.0
    n_tasks: int = 4
    noisy: bool = False
    latent_range: Interval = (0.05, 0.95)
    train_fraction: float = 0.6
    valid_fraction: float = 0.2
    isolated_warn_fraction: float = 0.05


# --- linear regression ---------------------------------------------------


def simulate_linreg(
    prior: LinRegPrior,
    n_data: int,
    seed: int,
    theta: Optional[Sequence[float]] = None,
) -> SetDataset:
    if n_data < 1:
        raise InputRangeError(f"n_data must be at least 1, got {n_data}")
    rng = make_rng(seed)
    if theta is None:
        theta = rng.normal(prior.theta_mean, prior.theta_std)
    theta = np.asarray(theta, dtype=np.float64).reshape(2)
    x = rng.uniform(prior.x_range[0], prior.x_range[1], size=n_data)
    sigma = rng.uniform(prior.sigma_range[0], prior.sigma_range[1], size=n_data)
    y = theta[0] * x + theta[1] + sigma * rng.standard_normal(n_data)
    return SetDataset(
        data=np.column_stack([y, x, sigma ** 2]),
        theta=theta,
        meta={"generator": "linreg", "seed": int(seed), "n_data": int(n_data)},
    )


def _linreg_columns(data: Union[SetDataset, np.ndarray]) -> np.ndarray:
    rows = data.data if isinstance(data, SetDataset) else np.asarray(data, dtype=np.float64)
    rows = rows.reshape(-1, 3)
    if np.any(rows[:, 2] <= 0):
        raise InvalidNoiseError("Every sigma^2 must be strictly positive.")
    return rows


def linreg_datum_scores(data: Union[SetDataset, np.ndarray], prior: LinRegPrior) -> np.ndarray:
    """Per-datum analytic score at the fiducial point, (n_data, 2), prior excluded."""
    rows = _linreg_columns(data)
    y, x, var = rows[:, 0], rows[:, 1], rows[:, 2]
    resid = y - (prior.theta_fid[0] * x + prior.theta_fid[1])
    return np.column_stack([x * resid / var, resid / var])


def linreg_score_fisher(
    data: Union[SetDataset, np.ndarray], prior: LinRegPrior
) -> Tuple[np.ndarray, FisherMatrix]:
    """Exact score and Fisher summed over the data, prior terms added once."""
    rows = _linreg_columns(data)
    x, var = rows[:, 1], rows[:, 2]
    t = prior.t_0 + linreg_datum_scores(rows, prior).sum(axis=0)
    w = 1.0 / var
    fisher = prior.cinv_p + np.array(
        [[np.sum(w * x * x), np.sum(w * x)], [np.sum(w * x), np.sum(w)]]
    )
    return t, FisherMatrix(chol=factor_spd(fisher))


def linreg_mle(data: Union[SetDataset, np.ndarray], prior: LinRegPrior) -> np.ndarray:
    t, fisher = linreg_score_fisher(data, prior)
    return mle_estimate(t, fisher, prior.theta_fid)


def linreg_mle_batch(sets: Sequence[SetDataset], prior: LinRegPrior) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic MLE and inverse Fisher for every set, (S, 2) and (S, 2, 2)."""
    estimates, covariances = [], []
    for s in sets:
        t, fisher = linreg_score_fisher(s, prior)
        estimates.append(mle_estimate(t, fisher, prior.theta_fid))
        covariances.append(np.linalg.inv(fisher.matrix))
    return np.stack(estimates), np.stack(covariances)


# --- robustness test distribution ----------------------------------------


def sample_truncated_exponential(
    rng: np.random.Generator,
    size: int,
    rate: float = ROBUST_SIGMA_RATE,
    loc: float = ROBUST_SIGMA_LOC,
    upper: float = ROBUST_SIGMA_MAX,
) -> np.ndarray:
    """loc + Exp(rate) conditioned on the result being <= upper, by inverse CDF."""
    if upper <= loc:
        raise ConfigurationError("upper bound must exceed the location")
    mass = -np.expm1(-rate * (upper - loc))
    u = rng.uniform(0.0, 1.0, size=size)
    return loc - np.log1p(-u * mass) / rate


def truncated_exponential_mean(
    rate: float = ROBUST_SIGMA_RATE, loc: float = ROBUST_SIGMA_LOC, upper: float = ROBUST_SIGMA_MAX
) -> float:
    width = upper - loc
    return loc + 1.0 / rate - width * np.exp(-rate * width) / (-np.expm1(-rate * width))


def simulate_robustness_test(
    seed: int,
    prior: Optional[LinRegPrior] = None,
    n_data: int = ROBUST_N_DATA,
    theta: Optional[Sequence[float]] = None,
) -> SetDataset:
    prior = prior or LinRegPrior()
    rng = make_rng(seed)
    if theta is None:
        theta = rng.normal(prior.theta_mean, prior.theta_std)
    theta = np.asarray(theta, dtype=np.float64).reshape(2)
    x = rng.uniform(ROBUST_X_RANGE[0], ROBUST_X_RANGE[1], size=n_data)
    sigma = sample_truncated_exponential(rng, n_data)
    y = theta[0] * x + theta[1] + sigma * rng.standard_normal(n_data)
    return SetDataset(
        data=np.column_stack([y, x, sigma ** 2]),
        theta=theta,
        meta={"generator": "linreg-robustness", "seed": int(seed), "n_data": int(n_data)},
    )


# --- Gamma population -----------------------------------------------------


def sample_decay_rates(rng: np.random.Generator, mu: float, scale: float, size: int) -> np.ndarray:
    """gamma_i ~ Gamma(alpha = mu / scale, beta = 1 / scale)."""
    return rng.gamma(shape=mu / scale, scale=scale, size=size)


def _gamma_chunk(rng: np.random.Generator, config: GammaPopConfig, mu: float, scale: float, size: int) -> np.ndarray:
    gamma = sample_decay_rates(rng, mu, scale, size)
    tau = rng.uniform(config.tau_range[0], config.tau_range[1], size=size)
    with np.errstate(divide="ignore", over="ignore"):
        lam = config.amplitude * np.exp(-tau / gamma)
    counts = rng.poisson(np.nan_to_num(lam, nan=0.0))
    return np.column_stack([tau, counts.astype(np.float64)])


def simulate_gamma_population(
    config: GammaPopConfig,
    theta: Optional[Sequence[float]] = None,
    n_data: int = 500,
    seed: int = 0,
) -> SetDataset:
    """
    Rows (tau_i, s_i). With censorship, rows with s_i < s_min are rejected and
    sampling continues in chunks until n_data rows are accepted; the first
    chunk draws exactly what the uncensored sampler would.
    """
    if n_data < 1:
        raise InputRangeError(f"n_data must be at least 1, got {n_data}")
    rng = make_rng(seed)
    if theta is None:
        theta = (rng.uniform(*config.mu_range), rng.uniform(*config.theta_scale_range))
    mu, scale = (float(v) for v in theta)
    if not (config.mu_range[0] <= mu <= config.mu_range[1]) or not (
        config.theta_scale_range[0] <= scale <= config.theta_scale_range[1]
    ):
        raise InputRangeError(f"theta=({mu}, {scale}) lies outside the prior box")

    meta = {"generator": "gamma", "seed": int(seed), "n_data": int(n_data), "s_min": config.s_min}
    rows = _gamma_chunk(rng, config, mu, scale, n_data)
    if not config.censored:
        meta["acceptance_rate"] = 1.0
        return SetDataset(data=rows, theta=np.array([mu, scale]), meta=meta)

    accepted = [rows[rows[:, 1] >= config.s_min]]
    n_accepted, n_drawn = accepted[0].shape[0], n_data
    give_up = max(int(10.0 / config.min_acceptance), 10 * n_data)
    while n_accepted < n_data:
        rate = n_accepted / n_drawn
        if n_drawn >= give_up and rate < config.min_acceptance:
            raise InfeasibleCensorshipError(
                f"Acceptance rate {rate:.2e} below {config.min_acceptance:.0e} for theta=({mu}, {scale})",
                acceptance_rate=rate,
            )
        need = n_data - n_accepted
        size = int(min(max(2 * need / max(rate, 1e-3), need), 1_000_000))
        chunk = _gamma_chunk(rng, config, mu, scale, size)
        keep = chunk[chunk[:, 1] >= config.s_min]
        accepted.append(keep)
        n_accepted += keep.shape[0]
        n_drawn += size

    data = np.concatenate(accepted)[:n_data]
    meta["acceptance_rate"] = n_accepted / n_drawn
    return SetDataset(data=data, theta=np.array([mu, scale]), meta=meta)


# --- noisy edges and synthetic graphs ----------------------------------------


def _check_support(support: Sequence[Tuple[int, int]]) -> None:
    for lo, hi in support:
        if lo < 1 or lo > hi:
            raise ConfigurationError(f"Invalid coin-toss support ({lo}, {hi})")


def measure_edges(
    p_true: np.ndarray,
    rng: np.random.Generator,
    support: Sequence[Tuple[int, int]] = TRAIN_N_SUPPORT,
) -> Tuple[np.ndarray, np.ndarray]:
    """N coin tosses per edge; N uniform on the (equal-weight mixture of) integer supports."""
    p_true = np.asarray(p_true, dtype=np.float64)
    if np.any(p_true < 0) or np.any(p_true >= 1):
        raise InputRangeError("True edge strengths must lie in [0, 1).")
    _check_support(support)
    component = rng.integers(0, len(support), size=p_true.shape)
    lows = np.array([lo for lo, _ in support])[component]
    highs = np.array([hi for _, hi in support])[component]
    n_tosses = rng.integers(lows, highs + 1)
    successes = rng.binomial(n_tosses, p_true)
    return successes / n_tosses, n_tosses


def simulate_noisy_edges(
    p_true: Union[float, np.ndarray],
    seed: int,
    support: Sequence[Tuple[int, int]] = TRAIN_N_SUPPORT,
) -> Tuple[Union[float, np.ndarray], Union[int, np.ndarray]]:
    p_hat, n_tosses = measure_edges(np.asarray(p_true, dtype=np.float64), make_rng(seed), support)
    if np.ndim(p_true) == 0:
        return float(p_hat), int(n_tosses)
    return p_hat, n_tosses


def _edge_features(p: np.ndarray, n_tosses: Optional[np.ndarray]) -> np.ndarray:
    if n_tosses is None:
        return p[:, None]
    return np.column_stack([p, n_tosses / N_FEATURE_SCALE])


def init_node_features(n_nodes: int, dst: np.ndarray, edge_features: np.ndarray) -> np.ndarray:
    """x_i = sum of the features of edges arriving at i."""
    features = np.zeros((n_nodes, edge_features.shape[1]))
    np.add.at(features, dst, edge_features)
    return features


def _split_masks(rng: np.random.Generator, n_nodes: int, config: ToyGraphConfig) -> dict:
    order = rng.permutation(n_nodes)
    n_train = int(round(config.train_fraction * n_nodes))
    n_valid = int(round(config.valid_fraction * n_nodes))
    return {
        "train": np.sort(order[:n_train]),
        "valid": np.sort(order[n_train:n_train + n_valid]),
        "test": np.sort(order[n_train + n_valid:]),
    }


def generate_toy_graph(config: ToyGraphConfig, seed: int) -> Graph:
    """
    Random G(n, m) graph with m = n * mean_degree / 2 undirected edges.
    Each node has a latent a ~ U(latent_range); edge strength is the mean of
    its endpoints' latents. Task k labels node v positive when the mean true
    strength over its neighbourhood exceeds the (k+1)/(n_tasks+1) quantile.
    """
    if config.n_nodes < 1 or config.mean_degree < 0 or config.n_tasks < 1:
        raise ConfigurationError("n_nodes and n_tasks must be positive, mean_degree nonnegative")
    rng = make_rng(seed)
    n = config.n_nodes
    n_undirected = int(round(n * config.mean_degree / 2))
    nx_graph = nx.gnm_random_graph(n, n_undirected, seed=int(rng.integers(2**31 - 1)))
    pairs = np.array(sorted(nx_graph.edges()), dtype=np.int64).reshape(-1, 2)

    latent = rng.uniform(config.latent_range[0], config.latent_range[1], size=n)
    p_undirected = 0.5 * (latent[pairs[:, 0]] + latent[pairs[:, 1]])
    tosses = measure_edges(p_undirected, rng, TRAIN_N_SUPPORT) if config.noisy else None

    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    p_true = np.concatenate([p_undirected, p_undirected])
    if tosses is None:
        edge_features = _edge_features(p_true, None)
    else:
        edge_features = _edge_features(np.tile(tosses[0], 2), np.tile(tosses[1], 2))

    degree = np.bincount(dst, minlength=n)
    strength = np.zeros(n)
    np.add.at(strength, dst, p_true)
    connected = degree > 0
    stat = np.divide(strength, degree, out=np.zeros(n), where=connected)
    labels = np.zeros((n, config.n_tasks))
    if connected.any():
        thresholds = np.quantile(stat[connected], (np.arange(config.n_tasks) + 1) / (config.n_tasks + 1))
        labels = (stat[:, None] > thresholds[None, :]).astype(np.float64)

    isolated = float(np.mean(~connected))
    if isolated > config.isolated_warn_fraction:
        logger.warning("Toy graph has %.1f%% isolated nodes (seed=%d)", 100 * isolated, seed)

    return Graph(
        node_features=init_node_features(n, dst, edge_features),
        edge_index=np.vstack([src, dst]),
        edge_features=edge_features,
        labels=labels,
        masks=_split_masks(rng, n, config),
        meta={"generator": "toy-graph", "seed": int(seed), "noisy": config.noisy,
              "isolated_fraction": isolated},
        edge_truth=p_true,
    )


def remeasure_graph(
    graph: Graph,
    seed: int,
    support: Sequence[Tuple[int, int]] = TEST_N_SUPPORT,
) -> Graph:
    """
    Fresh noisy measurement of every undirected edge of a noisy graph, with
    N drawn from `support`. Both directions of an edge share the measurement.
    Noise-free graphs are returned unchanged.
    """
    if not graph.meta.get("noisy") or graph.edge_truth is None:
        return graph
    rng = make_rng(seed)
    src, dst = graph.src, graph.dst
    forward = src < dst
    p_hat, n_tosses = measure_edges(graph.edge_truth[forward], rng, support)
    key = np.minimum(src, dst) * graph.n_nodes + np.maximum(src, dst)
    order = np.argsort(key[forward])
    lookup = order[np.searchsorted(key[forward][order], key)]
    edge_features = _edge_features(p_hat[lookup], n_tosses[lookup])
    return Graph(
        node_features=init_node_features(graph.n_nodes, dst, edge_features),
        edge_index=graph.edge_index.copy(),
        edge_features=edge_features,
        labels=graph.labels.copy(),
        masks={k: v.copy() for k, v in graph.masks.items()},
        meta={**graph.meta, "remeasure_seed": int(seed), "n_support": [list(s) for s in support]},
        edge_truth=graph.edge_truth.copy(),
    )
