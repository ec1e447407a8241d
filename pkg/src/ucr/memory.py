"""Cluster and camera prototypes, the prototype memory and the image memory.

The prototype memory holds ``P = P^o ∪ P^c``: prototypes of every committed
domain (frozen) followed by the current domain's prototypes (rebuilt each
epoch). The image memory keeps K_mem reliable samples per committed cluster,
each pointing at its stored prototype.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ucr.config import MemoryPolicy
from ucr.core import Rng, Sample
from ucr.errors import DataError, DegeneratePrototypeError, EmptyClusteringError
from ucr.pseudo_label import PseudoLabeling

logger = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


def _normalize_mean(vectors: np.ndarray, normalize: bool, what: str) -> np.ndarray:
    mean = vectors.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < DEGENERATE_NORM:
        raise DegeneratePrototypeError(f"degenerate prototype for {what}")
    return mean / norm if normalize else mean


def cluster_prototypes(
    embeddings: np.ndarray, labeling: PseudoLabeling, normalize: bool = True
) -> np.ndarray:
    """One prototype per cluster: the (normalized) mean of member embeddings.

    Returns:
        (num_clusters, d_emb) array, row ``a`` is the prototype of cluster ``a``.

    Raises:
        EmptyClusteringError: If the labeling has no clusters.
        DegeneratePrototypeError: If a cluster's members average to zero.
    """
    if labeling.num_clusters == 0:
        raise EmptyClusteringError("no clusters to build prototypes from")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    return np.stack(
        [
            _normalize_mean(embeddings[labeling.members(a)], normalize, f"cluster {a}")
            for a in range(labeling.num_clusters)
        ]
    )


@dataclass
class CameraPrototypes:
    """Intra-cluster camera prototypes, one row per (cluster, camera) pair present."""

    vectors: np.ndarray
    cluster_ids: np.ndarray
    camera_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.cluster_ids)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return self.index_of(*key) is not None

    def __getitem__(self, key: tuple[int, int]) -> np.ndarray:
        index = self.index_of(*key)
        if index is None:
            raise KeyError(key)
        return self.vectors[index]

    def index_of(self, cluster: int, camera: int) -> int | None:
        hits = np.flatnonzero((self.cluster_ids == cluster) & (self.camera_ids == camera))
        return int(hits[0]) if len(hits) else None

    def as_dict(self) -> dict[tuple[int, int], np.ndarray]:
        return {
            (int(a), int(b)): v
            for a, b, v in zip(self.cluster_ids, self.camera_ids, self.vectors)
        }

    @classmethod
    def empty(cls, d_emb: int) -> CameraPrototypes:
        return cls(
            np.zeros((0, d_emb)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        )


def camera_prototypes(
    embeddings: np.ndarray,
    labeling: PseudoLabeling,
    camera_ids: np.ndarray,
    normalize: bool = True,
) -> CameraPrototypes:
    """Mean embedding of each cluster's members per recording camera."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    camera_ids = np.asarray(camera_ids)
    vectors, clusters, cameras = [], [], []
    for a in range(labeling.num_clusters):
        members = labeling.members(a)
        for b in np.unique(camera_ids[members]):
            subset = members[camera_ids[members] == b]
            vectors.append(
                _normalize_mean(
                    embeddings[subset], normalize, f"cluster {a} camera {int(b)}"
                )
            )
            clusters.append(a)
            cameras.append(int(b))
    if not vectors:
        return CameraPrototypes.empty(embeddings.shape[1])
    return CameraPrototypes(
        np.stack(vectors), np.array(clusters, dtype=np.int64), np.array(cameras, dtype=np.int64)
    )


@dataclass
class PrototypeBank:
    """Prototype memory ``P = P^o ∪ P^c``.

    Attributes:
        d_emb: Prototype dimension
        old: Committed prototypes, never mutated once stored
        old_keys: (domain_id, cluster id at commit time) for each old prototype
        current: Current-domain cluster prototypes, replaced every epoch
        camera_current: Current-domain camera prototypes (never committed)
    """

    d_emb: int
    old: np.ndarray | None = None
    old_keys: list[tuple[int, int]] = field(default_factory=list)
    current: np.ndarray | None = None
    camera_current: CameraPrototypes | None = None

    def __post_init__(self) -> None:
        if self.old is None:
            self.old = np.zeros((0, self.d_emb))
        if self.current is None:
            self.current = np.zeros((0, self.d_emb))

    def __len__(self) -> int:
        return len(self.old) + len(self.current)

    @property
    def num_old(self) -> int:
        return len(self.old)

    def all_prototypes(self) -> np.ndarray:
        """Old prototypes first, so an old index is also an index into P."""
        return np.vstack([self.old, self.current])


def refresh_prototype_memory(
    bank: PrototypeBank,
    current: np.ndarray,
    camera: CameraPrototypes | None = None,
) -> None:
    """Replace the current-domain prototypes; old prototypes are untouched."""
    bank.current = np.asarray(current, dtype=np.float64).copy()
    bank.camera_current = camera


@dataclass(frozen=True)
class MemoryEntry:
    """One stored sample and the old prototype it rehearses against."""

    sample: Sample
    sample_index: int
    prototype_index: int
    key: tuple[int, int]


@dataclass
class ImageMemory:
    """K_mem reliable samples per committed cluster."""

    entries: list[MemoryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def features(self) -> np.ndarray:
        return np.stack([np.asarray(e.sample.features, dtype=np.float64) for e in self.entries])

    @property
    def prototype_indices(self) -> np.ndarray:
        return np.array([e.prototype_index for e in self.entries], dtype=np.int64)


def select_members(
    similarities: np.ndarray,
    members: np.ndarray,
    k: int,
    policy: MemoryPolicy | str,
    rng: Rng | None = None,
) -> np.ndarray:
    """Pick up to ``k`` members by similarity to their prototype.

    ``nearest`` keeps the highest similarities, ``farthest`` the lowest; ties
    go to the lowest sample index. ``random`` draws without replacement.
    """
    policy = MemoryPolicy(policy)
    k = min(k, len(members))
    if policy is MemoryPolicy.RANDOM:
        if rng is None:
            raise ValueError("random memory policy needs an Rng")
        return members[np.sort(rng.choice(len(members), size=k, replace=False))]
    key = -similarities if policy is MemoryPolicy.NEAREST else similarities
    order = np.lexsort((members, key))
    return members[order[:k]]


def commit_domain_memory(
    bank: PrototypeBank,
    memory: ImageMemory,
    embeddings: np.ndarray,
    labeling: PseudoLabeling,
    samples: list[Sample],
    k_mem: int,
    policy: MemoryPolicy | str = MemoryPolicy.NEAREST,
    rng: Rng | None = None,
    domain_id: int = 0,
) -> None:
    """Move the current prototypes into the old set and store K_mem samples each.

    ``bank.current`` must hold the prototypes of ``labeling`` over
    ``embeddings``; it is emptied afterwards.
    """
    if len(bank.current) != labeling.num_clusters:
        raise DataError(
            f"bank holds {len(bank.current)} current prototypes "
            f"for {labeling.num_clusters} clusters"
        )
    embeddings = np.asarray(embeddings, dtype=np.float64)
    expected = len(memory)
    for a in range(labeling.num_clusters):
        prototype = bank.current[a]
        members = labeling.members(a)
        chosen = select_members(embeddings[members] @ prototype, members, k_mem, policy, rng)
        prototype_index = bank.num_old
        key = (domain_id, a)
        bank.old = np.vstack([bank.old, prototype[None, :]])
        bank.old_keys.append(key)
        for index in chosen:
            memory.entries.append(
                MemoryEntry(samples[int(index)], int(index), prototype_index, key)
            )
        expected += min(k_mem, len(members))
    bank.current = np.zeros((0, bank.d_emb))
    bank.camera_current = None
    assert len(memory) == expected, "image memory size invariant violated"
    logger.info(
        "committed domain %d: %d prototypes, %d stored images (memory %d / bank %d)",
        domain_id,
        labeling.num_clusters,
        sum(min(k_mem, s) for s in labeling.cluster_sizes()),
        len(memory),
        bank.num_old,
    )


class BatchOrigin(str, Enum):
    CURRENT = "current"
    OLD = "old"


@dataclass
class IdentityPool:
    """Items grouped by pseudo identity, the input of the identity sampler.

    Attributes:
        groups: Mapping pseudo id -> item indices (sample or memory entry indices)
        origin: Whether items come from the current domain or the image memory
    """

    groups: dict[int, np.ndarray]
    origin: BatchOrigin

    @classmethod
    def from_labels(cls, labeling: PseudoLabeling) -> IdentityPool:
        """Current-domain pool; outliers are left out."""
        return cls(
            {a: labeling.members(a) for a in range(labeling.num_clusters)},
            BatchOrigin.CURRENT,
        )

    @classmethod
    def from_memory(cls, memory: ImageMemory) -> IdentityPool:
        groups: dict[int, list[int]] = {}
        for index, entry in enumerate(memory.entries):
            groups.setdefault(entry.prototype_index, []).append(index)
        return cls(
            {k: np.array(v, dtype=np.int64) for k, v in sorted(groups.items())},
            BatchOrigin.OLD,
        )


@dataclass
class MiniBatch:
    """Sampled item indices with their aligned pseudo ids."""

    indices: np.ndarray
    pseudo_ids: np.ndarray
    origin: BatchOrigin

    def __len__(self) -> int:
        return len(self.indices)


def sample_batch(pool: IdentityPool, spec: tuple[int, int], rng: Rng) -> MiniBatch:
    """Random identity sampler.

    Draws ``spec[0]`` distinct pseudo ids (with replacement only when the pool
    has fewer ids), then ``spec[1]`` items per id (with replacement only when
    the id has fewer items).

    Raises:
        DataError: If the pool is empty.
    """
    ids_wanted, per_id = spec
    ids = np.array([k for k, v in pool.groups.items() if len(v)], dtype=np.int64)
    if len(ids) == 0:
        raise DataError(f"cannot sample a {pool.origin.value} batch from an empty pool")
    chosen_ids = rng.choice(ids, size=ids_wanted, replace=len(ids) < ids_wanted)
    indices, pseudo_ids = [], []
    for pid in chosen_ids:
        items = pool.groups[int(pid)]
        picked = rng.choice(items, size=per_id, replace=len(items) < per_id)
        indices.append(picked)
        pseudo_ids.append(np.full(per_id, pid, dtype=np.int64))
    return MiniBatch(np.concatenate(indices), np.concatenate(pseudo_ids), pool.origin)
