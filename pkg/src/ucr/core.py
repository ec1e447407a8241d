"""Domain types, deterministic randomness and stream validation.

Everything here is read-only after construction and safe to share across
threads, except :class:`Rng`, which has a single owner. Code that needs
independent randomness forks a child with :meth:`Rng.fork`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ucr.errors import ConfigError, DataError

THREADS_ENV_VAR = "UCR_THREADS"


@dataclass(frozen=True)
class Sample:
    """One unlabeled item of a domain.

    Attributes:
        features: Raw input vector of dimension d_in
        domain_id: Index of the domain the sample belongs to
        camera_id: Camera index in [0, num_cameras)
        gt_id: Ground-truth identity, read only by evaluation code
    """

    features: np.ndarray
    domain_id: int
    camera_id: int
    gt_id: int | None = None


@dataclass
class Domain:
    """An ordered collection of samples recorded by ``num_cameras`` cameras."""

    name: str
    samples: list[Sample]
    num_cameras: int
    domain_id: int = 0
    _features: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.num_cameras < 1:
            raise DataError(f"domain {self.name!r}: num_cameras must be >= 1")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def features(self) -> np.ndarray:
        """Stacked (n, d_in) float64 feature matrix, built once."""
        if self._features is None:
            if not self.samples:
                self._features = np.zeros((0, 0))
            else:
                self._features = np.stack(
                    [np.asarray(s.features, dtype=np.float64) for s in self.samples]
                )
        return self._features

    @property
    def camera_ids(self) -> np.ndarray:
        return np.array([s.camera_id for s in self.samples], dtype=np.int64)


class Rng:
    """Seeded random source backed by numpy's PCG64 bit generator.

    PCG64 produces the same stream for the same seed on every platform
    numpy supports. Children are derived with ``SeedSequence([seed, key])``
    so forking never consumes draws from the parent.

    Attributes:
        seed: The 64-bit seed this generator was built from
    """

    ALGORITHM = "PCG64"

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def fork(self, key: int) -> Rng:
        """Return an independent child generator for ``key``.

        Example:
            >>> init_rng = Rng(0).fork(1)
        """
        state = np.random.SeedSequence([self.seed, int(key)]).generate_state(
            1, dtype=np.uint64
        )
        return Rng(int(state[0]))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        """Draw from U[low, high)."""
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        """Draw Gaussian values with mean ``loc`` and standard deviation ``scale``."""
        return self.generator.normal(loc, scale, size)

    def choice(self, items, size: int, replace: bool) -> np.ndarray:
        """Pick ``size`` entries of ``items``, with or without replacement."""
        return self.generator.choice(items, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        """Random ordering of ``range(n)``."""
        return self.generator.permutation(n)

    def random(self, size=None) -> np.ndarray:
        """Draw from U[0, 1)."""
        return self.generator.random(size)


def validate_stream(domains: list[Domain], d_in: int) -> None:
    """Check every sample's dimension and camera id.

    Args:
        domains: Domains in stream order
        d_in: Expected raw feature dimension

    Raises:
        DataError: On the first sample with the wrong dimension or an
            out-of-range camera id.
    """
    for domain in domains:
        for index, sample in enumerate(domain.samples):
            features = np.asarray(sample.features)
            if features.ndim != 1 or features.shape[0] != d_in:
                raise DataError(
                    f"dimension mismatch in domain {domain.name!r} at sample {index}: "
                    f"expected {d_in}, got {features.shape[-1] if features.ndim else 0}"
                )
            if not 0 <= sample.camera_id < domain.num_cameras:
                raise DataError(
                    f"camera out of range in domain {domain.name!r} at sample {index}: "
                    f"camera_id={sample.camera_id}, num_cameras={domain.num_cameras}"
                )


def resolve_workers(requested: int | None = None) -> int:
    """Number of worker threads, capped by the UCR_THREADS environment variable."""
    cap = os.environ.get(THREADS_ENV_VAR)
    workers = requested or os.cpu_count() or 1
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError as e:
            raise ConfigError(
                f"must be an integer, got {cap!r}", key=THREADS_ENV_VAR
            ) from e
    return max(1, workers)
