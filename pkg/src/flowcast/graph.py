"""Road-network graphs and the adjacency matrices derived from them.

Two kinds of node mixing feed the spatial layer: a fixed pair of directional
row-stochastic matrices built from physical edge distances, and a learnable
adjacency factored as softmax(relu(e_c @ e_r)).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import IngestionError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_SPARSITY_THRESHOLD = 0.1


@dataclass
class RoadGraph:
    """Directed weighted road network: nodes are sensors, edges carry distances."""

    node_count: int
    edges: list[tuple[int, int, float]] = field(default_factory=list)
    node_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.node_count <= 0:
            raise IngestionError(f"node_count must be positive, got {self.node_count}")
        if not self.node_ids:
            self.node_ids = [str(i) for i in range(self.node_count)]
        if len(self.node_ids) != self.node_count:
            raise IngestionError(
                f"{len(self.node_ids)} node ids for {self.node_count} nodes"
            )
        for src, dst, dist in self.edges:
            if not (0 <= src < self.node_count and 0 <= dst < self.node_count):
                raise IngestionError(
                    f"edge ({src}, {dst}) references a node id outside [0, {self.node_count})"
                )
            if src == dst:
                raise IngestionError(f"self-loop edge on node {src} not allowed in input")
            if dist < 0:
                raise IngestionError(f"negative distance {dist} on edge ({src}, {dst})")

    def reversed_edges(self) -> list[tuple[int, int, float]]:
        return [(dst, src, dist) for src, dst, dist in self.edges]


@dataclass
class AdjacencyPair:
    """Forward/backward row-stochastic adjacency matrices (rows sum to 1)."""

    a_fwd: np.ndarray
    a_bwd: np.ndarray


def _distance_weights(
    edges: list[tuple[int, int, float]], node_count: int, sigma: float, kappa: float
) -> np.ndarray:
    weights = np.zeros((node_count, node_count), dtype=np.float64)
    # later duplicates overwrite earlier ones, matching the loader's tie-break
    for src, dst, dist in edges:
        w = math.exp(-(dist * dist) / (sigma * sigma))
        weights[src, dst] = w if w >= kappa else 0.0
    return weights


def _row_normalize_with_self_loops(weights: np.ndarray) -> np.ndarray:
    a = weights + np.eye(weights.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def default_kernel_width(graph: RoadGraph) -> float:
    """Standard deviation of the edge distances; 1.0 when degenerate."""
    dists = np.array([d for _, _, d in graph.edges], dtype=np.float64)
    if dists.size == 0:
        return 1.0
    std = float(dists.std())
    return std if std > 0 else 1.0


def build_fixed_adjacency(
    graph: RoadGraph,
    sigma: float | None = None,
    kappa: float = DEFAULT_SPARSITY_THRESHOLD,
) -> AdjacencyPair:
    """Gaussian-kernel adjacency pair from edge distances.

    Edge weight exp(-d²/σ²) is zeroed below the sparsity threshold; the
    forward matrix follows the edges as given and the backward one the
    reversed edges. Both get identity self-loops and row normalization, so a
    node with no outgoing edges becomes a pure self-loop row.
    """
    if sigma is None:
        sigma = default_kernel_width(graph)
    if sigma <= 0:
        raise ValueError(f"kernel width must be positive, got {sigma}")
    if not (0 <= kappa < 1):
        raise ValueError(f"sparsity threshold must lie in [0, 1), got {kappa}")
    fwd = _distance_weights(graph.edges, graph.node_count, sigma, kappa)
    bwd = _distance_weights(graph.reversed_edges(), graph.node_count, sigma, kappa)
    return AdjacencyPair(
        a_fwd=_row_normalize_with_self_loops(fwd),
        a_bwd=_row_normalize_with_self_loops(bwd),
    )


def init_adaptive_embeddings(
    node_count: int, rank: int, rng: np.random.Generator
) -> tuple[ad.Tensor, ad.Tensor]:
    """Learnable column/row factors of the adaptive adjacency, uniform in ±1/√rank."""
    if rank < 1:
        raise ValueError(f"embedding rank must be >= 1, got {rank}")
    bound = 1.0 / math.sqrt(rank)
    e_c = ad.Tensor(rng.uniform(-bound, bound, (node_count, rank)), requires_grad=True)
    e_r = ad.Tensor(rng.uniform(-bound, bound, (rank, node_count)), requires_grad=True)
    return e_c, e_r


def adaptive_adjacency(e_c: ad.Tensor, e_r: ad.Tensor) -> ad.Tensor:
    """Row-stochastic learned adjacency softmax(relu(e_c @ e_r))."""
    if e_c.ndim != 2 or e_r.ndim != 2 or e_c.shape[1] != e_r.shape[0]:
        raise ShapeError(
            f"embedding rank mismatch: {e_c.shape} @ {e_r.shape}"
        )
    if e_c.shape[0] != e_r.shape[1]:
        raise ShapeError(
            f"adaptive adjacency must be square, got {e_c.shape[0]}x{e_r.shape[1]}"
        )
    return ad.softmax_lastdim(ad.relu(ad.matmul(e_c, e_r)))
