"""
Evaluation metrics: rank-based ROC-AUC, one-sample Kolmogorov-Smirnov test
against Uniform(0, 1), and probability-integral-transform (PIT) values for
calibration checks.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import kolmogorov
from scipy.stats import norm, rankdata

from services.errors import InputRangeError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

MIN_KS_SAMPLES = 8
MIN_POSTERIOR_MASS = 1e-6


def roc_auc(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Mann-Whitney AUC; tied scores receive their average rank."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels must have the same length")
    positive = labels == 1
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes to be present.")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mean_roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average ROC-AUC over task columns, skipping tasks with a single class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels.reshape(-1, 1)
    values = []
    for k in range(scores.shape[1]):
        try:
            values.append(roc_auc(scores[:, k], labels[:, k]))
        except UndefinedMetricError:
            logger.debug("Skipping task %d: single class in the evaluated nodes", k)
    if not values:
        raise UndefinedMetricError("ROC-AUC is undefined for every task.")
    return float(np.mean(values))


def ks_test(samples: Sequence[float]) -> Tuple[float, float]:
    """One-sample KS distance to Uniform(0, 1) and its asymptotic p-value."""
    x = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    n = x.size
    if n < MIN_KS_SAMPLES:
        raise InputRangeError(f"ks_test needs at least {MIN_KS_SAMPLES} samples, got {n}")
    if np.any(~np.isfinite(x)) or x[0] < 0 or x[-1] > 1:
        raise InputRangeError("ks_test samples must lie in [0, 1].")
    i = np.arange(1, n + 1)
    statistic = float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))
    return statistic, float(kolmogorov(np.sqrt(n) * statistic))


@dataclass
class PitResult:
    values: np.ndarray  # (records, n_p); NaN where flagged
    flagged: np.ndarray  # (records,) bool, posterior mass in the prior box below threshold

    @property
    def kept(self) -> np.ndarray:
        return self.values[~self.flagged]

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())


def gaussian_pit(
    theta_hat: np.ndarray,
    fisher: np.ndarray,
    theta_true: np.ndarray,
    lower: Sequence[float],
    upper: Sequence[float],
    min_mass: float = MIN_POSTERIOR_MASS,
) -> PitResult:
    """
    Marginal CDF of the truth under N(theta_hat, F^-1) truncated to the prior
    box [lower, upper] and renormalised. Inputs are stacked per record:
    theta_hat (R, n_p), fisher (R, n_p, n_p), theta_true (R, n_p).
    """
    theta_hat = np.atleast_2d(np.asarray(theta_hat, dtype=np.float64))
    theta_true = np.atleast_2d(np.asarray(theta_true, dtype=np.float64))
    fisher = np.asarray(fisher, dtype=np.float64).reshape(theta_hat.shape + theta_hat.shape[-1:])
    lower, upper = np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64)
    if theta_true.shape != theta_hat.shape:
        raise ShapeError("theta_true and theta_hat must have the same shape")

    covariance = np.linalg.inv(fisher)
    sd = np.sqrt(np.diagonal(covariance, axis1=1, axis2=2))
    cdf_lo = norm.cdf((lower - theta_hat) / sd)
    cdf_hi = norm.cdf((upper - theta_hat) / sd)
    cdf_truth = norm.cdf((np.clip(theta_true, lower, upper) - theta_hat) / sd)
    mass = cdf_hi - cdf_lo
    flagged = np.any(mass < min_mass, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.clip((cdf_truth - cdf_lo) / mass, 0.0, 1.0)
    values[flagged] = np.nan
    if flagged.any():
        logger.warning("%d of %d PIT records flagged (posterior mass < %.0e in the prior box)",
                       int(flagged.sum()), flagged.size, min_mass)
    return PitResult(values=values, flagged=flagged)


def pit_from_samples(samples: np.ndarray, theta_true: np.ndarray) -> np.ndarray:
    """
    Fraction of posterior samples below the truth, ties counted as one half.
    samples (R, S, n_p), theta_true (R, n_p) -> (R, n_p).
    """
    samples = np.asarray(samples, dtype=np.float64)
    theta_true = np.asarray(theta_true, dtype=np.float64)[:, None, :]
    below = np.mean(samples < theta_true, axis=1)
    ties = np.mean(samples == theta_true, axis=1)
    return below + 0.5 * ties
