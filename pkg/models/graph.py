"""
Graph: node features, directed weighted edges, per-node multi-task binary
labels and disjoint train/valid/test node masks.

Undirected graphs are stored with both edge directions. Edges are kept in
canonical (dst, src) order so neighbourhood reductions run in a fixed order.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np


@dataclass
class Graph:
    node_features: np.ndarray
    edge_index: np.ndarray  # (2, n_edges): row 0 = src, row 1 = dst
    edge_features: np.ndarray  # (n_edges, d_edge)
    labels: np.ndarray  # (n_nodes, n_tasks) in {0, 1}
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)
    edge_truth: Optional[np.ndarray] = None  # (n_edges,) noise-free strengths, when known

    def __post_init__(self) -> None:
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.edge_index = np.asarray(self.edge_index, dtype=np.int64).reshape(2, -1)
        self.edge_features = np.asarray(self.edge_features, dtype=np.float64)
        if self.edge_features.ndim == 1:
            self.edge_features = self.edge_features[:, None]
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        self.masks = {k: np.asarray(v, dtype=np.int64) for k, v in self.masks.items()}
        if self.edge_truth is not None:
            self.edge_truth = np.asarray(self.edge_truth, dtype=np.float64).reshape(-1)
        self.validate()
        self.canonicalize()

    @property
    def n_nodes(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edge_index.shape[1])

    @property
    def n_tasks(self) -> int:
        return int(self.labels.shape[1])

    @property
    def src(self) -> np.ndarray:
        return self.edge_index[0]

    @property
    def dst(self) -> np.ndarray:
        return self.edge_index[1]

    def validate(self) -> None:
        n = self.node_features.shape[0]
        if self.edge_index.size and (self.edge_index.min() < 0 or self.edge_index.max() >= n):
            raise ValueError("Edge endpoint out of range.")
        if self.edge_features.shape[0] != self.edge_index.shape[1]:
            raise ValueError("edge_features row count must equal the number of edges.")
        if self.edge_truth is not None and self.edge_truth.shape[0] != self.edge_index.shape[1]:
            raise ValueError("edge_truth length must equal the number of edges.")
        if self.labels.shape[0] != n:
            raise ValueError("labels row count must equal the number of nodes.")
        seen: set = set()
        for name, idx in self.masks.items():
            overlap = seen.intersection(idx.tolist())
            if overlap:
                raise ValueError(f"Mask '{name}' overlaps another mask on {len(overlap)} nodes.")
            seen.update(idx.tolist())

    def canonicalize(self) -> None:
        order = np.lexsort((self.edge_index[0], self.edge_index[1]))
        self.edge_index = self.edge_index[:, order]
        self.edge_features = self.edge_features[order]
        if self.edge_truth is not None:
            self.edge_truth = self.edge_truth[order]

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)

    def neighborhood(self, node: int) -> np.ndarray:
        """Edge ids whose destination is `node`, in canonical order."""
        return np.flatnonzero(self.dst == node)

    def __repr__(self) -> str:
        return f"<Graph nodes={self.n_nodes} edges={self.n_edges} tasks={self.n_tasks}>"
