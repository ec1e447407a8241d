"""Pseudo labels from momentum embeddings: re-ranked Jaccard distance + DBSCAN.

The re-ranking follows the k-reciprocal encoding lineage: k-reciprocal
neighbor sets, expansion with half-size reciprocal sets of the members,
Gaussian-weighted membership vectors, local query expansion over ``k2``
neighbors and a Jaccard distance between membership vectors. The blend
with the original distance is fixed to zero (pure Jaccard).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.cluster import DBSCAN

from ucr.config import HyperParams
from ucr.errors import DataError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-6


class DistanceKind(str, Enum):
    COSINE = "cosine"
    JACCARD = "jaccard"


@dataclass
class DistanceMatrix:
    """An n x n distance matrix and what it measures."""

    values: np.ndarray
    kind: DistanceKind

    def __len__(self) -> int:
        return self.values.shape[0]

    def check(self) -> None:
        """Assert range, symmetry and zero diagonal (run under ``__debug__``)."""
        upper = 2.0 if self.kind is DistanceKind.COSINE else 1.0
        d = self.values
        assert d.shape[0] == d.shape[1], "distance matrix must be square"
        assert np.all(np.diag(d) == 0.0), "diagonal must be zero"
        assert np.all(d >= 0.0) and np.all(d <= upper), f"entries outside [0, {upper}]"
        assert np.allclose(d, d.T, atol=SYMMETRY_TOL), "matrix must be symmetric"


@dataclass
class PseudoLabeling:
    """Per-sample cluster ids; -1 marks an outlier.

    Attributes:
        labels: Integer array, non-negative ids form [0, num_clusters)
        num_clusters: Number of clusters found
    """

    labels: np.ndarray
    num_clusters: int

    @property
    def num_outliers(self) -> int:
        return int(np.sum(self.labels < 0))

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.num_clusters)


def cosine_distance_matrix(embeddings: np.ndarray) -> DistanceMatrix:
    """``D[i][j] = 1 - <e_i, e_j>`` for unit-norm rows, diagonal exactly 0."""
    e = np.asarray(embeddings, dtype=np.float64)
    d = 1.0 - e @ e.T
    d = np.clip((d + d.T) / 2.0, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, DistanceKind.COSINE)


def _ranking(d: np.ndarray) -> np.ndarray:
    """Row-wise neighbor order; self first, ties broken by ascending index."""
    keyed = d.copy()
    np.fill_diagonal(keyed, -1.0)
    return np.argsort(keyed, axis=1, kind="stable")


def _k_reciprocal(rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward_neighbors = rank[i, : k + 1]
    backward = rank[forward_neighbors, : k + 1]
    return forward_neighbors[np.any(backward == i, axis=1)]


def rerank_jaccard(dist: DistanceMatrix, k1: int, k2: int) -> DistanceMatrix:
    """k-reciprocal re-ranked Jaccard distance.

    Args:
        dist: Cosine distance matrix over unit-norm embeddings
        k1: Size of the k-reciprocal neighborhood
        k2: Number of neighbors averaged by local query expansion

    Returns:
        Symmetric Jaccard DistanceMatrix with entries in [0, 1].

    Raises:
        DataError: If ``k1 >= n`` or ``k2`` is outside [1, k1].
    """
    d = dist.values
    n = d.shape[0]
    if k1 >= n:
        raise DataError(f"rerank k1={k1} must be smaller than the sample count {n}")
    if not 1 <= k2 <= k1:
        raise DataError(f"rerank k2={k2} must be in [1, k1={k1}]")

    rank = _ranking(d)
    half = int(np.around(k1 / 2))
    # squared Euclidean distance between unit vectors is twice the cosine distance
    sq = 2.0 * d
    membership = np.zeros((n, n))
    for i in range(n):
        reciprocal = _k_reciprocal(rank, i, k1)
        expansion = reciprocal
        for candidate in reciprocal:
            candidate_set = _k_reciprocal(rank, candidate, half)
            overlap = np.intersect1d(candidate_set, reciprocal, assume_unique=True)
            if len(overlap) > 2.0 / 3.0 * len(candidate_set):
                expansion = np.append(expansion, candidate_set)
        expansion = np.unique(expansion)
        weight = np.exp(-sq[i, expansion])
        membership[i, expansion] = weight / weight.sum()

    if k2 > 1:
        membership = np.stack([membership[rank[i, :k2]].mean(axis=0) for i in range(n)])

    inverted = [np.flatnonzero(membership[:, j]) for j in range(n)]
    jaccard = np.zeros((n, n))
    for i in range(n):
        shared = np.zeros(n)
        for j in np.flatnonzero(membership[i]):
            rows = inverted[j]
            shared[rows] += np.minimum(membership[i, j], membership[rows, j])
        jaccard[i] = 1.0 - shared / (2.0 - shared)

    jaccard = np.clip((jaccard + jaccard.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(jaccard, 0.0)
    result = DistanceMatrix(jaccard, DistanceKind.JACCARD)
    if __debug__:
        result.check()
    return result


def _renumber(labels: np.ndarray) -> PseudoLabeling:
    """Relabel clusters contiguously by first occurrence in index order."""
    mapping: dict[int, int] = {}
    out = np.full(labels.shape, -1, dtype=np.int64)
    for index, label in enumerate(labels):
        if label < 0:
            continue
        if label not in mapping:
            mapping[label] = len(mapping)
        out[index] = mapping[label]
    return PseudoLabeling(out, len(mapping))


def dbscan(dist: DistanceMatrix, eps: float, min_pts: int) -> PseudoLabeling:
    """Classic DBSCAN on a precomputed distance matrix.

    A point is core when it has at least ``min_pts - 1`` other points within
    ``eps`` (the point itself counts toward ``min_pts``). Clusters grow from
    core points in ascending index order, so a border point joins the first
    cluster that reaches it. Noise is labeled -1.
    """
    if len(dist) == 0:
        return PseudoLabeling(np.zeros(0, dtype=np.int64), 0)
    raw = DBSCAN(eps=eps, min_samples=min_pts, metric="precomputed").fit_predict(
        dist.values
    )
    return _renumber(raw)


def pseudo_labels(embeddings: np.ndarray, hp: HyperParams) -> PseudoLabeling:
    """Cluster momentum embeddings: cosine -> re-ranked Jaccard -> DBSCAN.

    Re-ranking neighborhoods are clamped to the sample count, so small
    domains still cluster; fewer than ``dbscan_min_pts`` samples are all
    outliers.
    """
    n = len(embeddings)
    if n < hp.dbscan_min_pts or n < 2:
        return PseudoLabeling(np.full(n, -1, dtype=np.int64), 0)
    k1 = min(hp.rerank_k1, n - 1)
    k2 = min(hp.rerank_k2, k1)
    jaccard = rerank_jaccard(cosine_distance_matrix(embeddings), k1, k2)
    labeling = dbscan(jaccard, hp.dbscan_eps, hp.dbscan_min_pts)
    logger.debug(
        "pseudo labels: %d clusters, %d outliers of %d samples",
        labeling.num_clusters,
        labeling.num_outliers,
        n,
    )
    return labeling
