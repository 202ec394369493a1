"""
SetDataset: one simulated set of per-datum feature rows together with the
parameters that generated it (a supervised (data, theta) pair).
"""
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np


@dataclass
class SetDataset:
    data: np.ndarray
    theta: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"SetDataset.data must be 2-D, got shape {self.data.shape}")

    @property
    def n_data(self) -> int:
        return int(self.data.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.data.shape[1])

    def __repr__(self) -> str:
        return f"<SetDataset {self.meta.get('generator', '?')} n_data={self.n_data} theta={self.theta.tolist()}>"
