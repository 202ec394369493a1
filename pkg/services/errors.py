"""
Exception hierarchy shared by every service.

Each error carries a machine-readable `category` that the CLI prints and
maps to an exit code. Input problems subclass ValueError and numerical
failures subclass RuntimeError, so existing `except ValueError` call sites
keep working.
"""

from typing import Optional


class FishnetsError(Exception):
    category = "fishnets"


class ShapeError(FishnetsError, ValueError):
    category = "shape"


class ConfigurationError(FishnetsError, ValueError):
    category = "config"


class EmptyAggregationError(FishnetsError, ValueError):
    category = "empty-aggregation"


class InputRangeError(FishnetsError, ValueError):
    category = "input-range"


class InvalidNoiseError(FishnetsError, ValueError):
    category = "invalid-noise"


class UndefinedMetricError(FishnetsError, ValueError):
    category = "undefined-metric"


class NoResultsError(FishnetsError, LookupError):
    category = "no-results"


class FactorizationError(FishnetsError, RuntimeError):
    category = "factorization"


class IllConditionedFisherError(FishnetsError, RuntimeError):
    category = "ill-conditioned-fisher"

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class InfeasibleCensorshipError(FishnetsError, RuntimeError):
    category = "infeasible-censorship"

    def __init__(self, message: str, acceptance_rate: float):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


class TrainingDivergenceError(FishnetsError, RuntimeError):
    """Raised when a loss or gradient goes non-finite.

    `model` holds the model restored to its last finite parameters.
    """

    category = "training-divergence"

    def __init__(self, message: str, epoch: int, model: Optional[object] = None):
        super().__init__(message)
        self.epoch = epoch
        self.model = model
