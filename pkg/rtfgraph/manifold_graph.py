"""
Per-microphone KNN graphs over clean RTF features.

Each non-reference microphone gets its own graph. Edges point into a node
from its K nearest clean features (Euclidean, exhaustive search, ties to the
smaller position id). Noisy query nodes are attached to the clean nodes
only; clean neighbourhoods never change.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from rtfgraph.errors import ShapeError

logger = logging.getLogger(__name__)

SELF_ID = -1


@dataclass(frozen=True)
class FeatureBank:
    """Clean features (N, M - 1, d) with their position ids (N,)."""

    features: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        ids = np.asarray(self.ids, dtype=np.int64)
        if features.ndim != 3:
            raise ShapeError(f"Bank features must be (nodes, mics, d), got shape {features.shape}")
        if ids.shape != (features.shape[0],):
            raise ShapeError(f"{ids.shape[0]} ids for {features.shape[0]} bank rows")
        if np.unique(ids).size != ids.size:
            raise ValueError("Bank position ids must be unique")
        if not np.all(np.isfinite(features)):
            raise ValueError("Bank features must be finite")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "ids", ids)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def num_graphs(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    def row_of(self, position_id: int) -> int:
        rows = np.flatnonzero(self.ids == position_id)
        if rows.size == 0:
            raise KeyError(f"Position id {position_id} is not in the bank")
        return int(rows[0])


@dataclass(frozen=True)
class ManifoldGraph:
    """In-neighbour rows (M - 1, N, K) and distances of every clean node."""

    neighbors: np.ndarray
    distances: np.ndarray
    k: int
    metric: str = "euclidean"

    def neighbor_ids(self, bank: FeatureBank) -> np.ndarray:
        return bank.ids[self.neighbors]


@dataclass(frozen=True)
class QueryAttachment:
    """A noisy query node and its clean in-neighbours, per microphone graph.

    center: (M - 1, d); neighbor_ids: (M - 1, K) with SELF_ID for the query
    itself; neighbor_features: (M - 1, K, d); distances sorted per graph.
    """

    center: np.ndarray
    neighbor_ids: np.ndarray
    neighbor_features: np.ndarray
    distances: np.ndarray


def _nearest(candidates: np.ndarray, ids: np.ndarray, point: np.ndarray, k: int):
    dist = np.linalg.norm(candidates - point, axis=1)
    order = np.lexsort((ids, dist))[:k]
    return order, dist[order]


def build_knn_graph(bank: FeatureBank, k: int) -> ManifoldGraph:
    """Exact KNN graph of each microphone's clean features.

    Raises:
        ValueError: If k >= number of bank rows
    """
    n = bank.size
    if not 0 < k < n:
        raise ValueError(f"K={k} must lie in [1, {n - 1}] for a bank of {n} nodes")
    neighbors = np.empty((bank.num_graphs, n, k), dtype=np.int64)
    distances = np.empty((bank.num_graphs, n, k))
    for mic in range(bank.num_graphs):
        features = bank.features[:, mic, :]
        for row in range(n):
            dist = np.linalg.norm(features - features[row], axis=1)
            dist[row] = np.inf
            order = np.lexsort((bank.ids, dist))[:k]
            neighbors[mic, row] = order
            distances[mic, row] = dist[order]
    logger.debug(f"KNN graph: {bank.num_graphs} mics, {n} nodes, K={k}")
    return ManifoldGraph(neighbors=neighbors, distances=distances, k=k)


def _query_matrix(bank: FeatureBank, query) -> np.ndarray:
    taps = getattr(query, "taps", query)
    taps = np.asarray(taps, dtype=np.float64)
    if taps.shape != bank.features.shape[1:]:
        raise ShapeError(f"Query shape {taps.shape} does not match bank nodes {bank.features.shape[1:]}")
    return taps


def attach_query(graph: Optional[ManifoldGraph], bank: FeatureBank, query, k: int,
                 exclude_row: Optional[int] = None) -> QueryAttachment:
    """Connect a query node to its K nearest clean nodes in every microphone graph.

    Args:
        graph: Graph over the bank; must match its K and node count
        bank (FeatureBank): Clean candidate nodes
        query: RTFFeature or (M - 1, d) array
        k (int): Number of neighbours
        exclude_row (int): Bank row removed from the candidates

    Returns:
        QueryAttachment: The attached query

    Raises:
        ValueError: If K differs from the graph K or exceeds the candidates
        ShapeError: If the graph was built over a different bank
    """
    if graph is not None:
        if graph.k != k:
            raise ValueError(f"Query K={k} differs from graph K={graph.k}")
        if graph.neighbors.shape != (bank.num_graphs, bank.size, k):
            raise ShapeError(f"Graph of shape {graph.neighbors.shape} does not cover a bank of {bank.size} nodes"
                             f" in {bank.num_graphs} graphs")
    center = _query_matrix(bank, query)
    keep = np.ones(bank.size, dtype=bool)
    if exclude_row is not None:
        keep[exclude_row] = False
    rows = np.flatnonzero(keep)
    if k > rows.size:
        raise ValueError(f"K={k} exceeds the {rows.size} candidate nodes")
    ids = bank.ids[rows]

    neighbor_ids = np.empty((bank.num_graphs, k), dtype=np.int64)
    neighbor_features = np.empty((bank.num_graphs, k, bank.d))
    distances = np.empty((bank.num_graphs, k))
    for mic in range(bank.num_graphs):
        candidates = bank.features[rows, mic, :]
        order, dist = _nearest(candidates, ids, center[mic], k)
        neighbor_ids[mic] = ids[order]
        neighbor_features[mic] = candidates[order]
        distances[mic] = dist
    return QueryAttachment(center, neighbor_ids, neighbor_features, distances)


def leave_one_out(bank: FeatureBank, position_id: int, noisy_features, k: int) -> QueryAttachment:
    """Training query for a bank position: its clean node is replaced by the noisy one.

    Raises:
        KeyError: If the position id is not in the bank
    """
    return attach_query(None, bank, noisy_features, k, exclude_row=bank.row_of(position_id))


def self_attachment(query) -> QueryAttachment:
    """Ablation wiring: the query node's only neighbour is itself."""
    center = np.asarray(getattr(query, "taps", query), dtype=np.float64)
    n_graphs = center.shape[0]
    return QueryAttachment(
        center=center,
        neighbor_ids=np.full((n_graphs, 1), SELF_ID, dtype=np.int64),
        neighbor_features=center[:, None, :].copy(),
        distances=np.zeros((n_graphs, 1)),
    )
