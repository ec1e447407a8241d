"""Synthetic lifelong domain streams and the on-disk dataset container.

Every domain owns a low-dimensional identity subspace of the raw feature
space, slightly tilted away from a shared orthonormal frame. Identity
centroids live in that subspace plus a per-domain translation. A sample of
domain ``i`` also carries per-sample style variation inside the identity
subspaces of the other seen domains, so what is nuisance for one domain is
the discriminative signal of another. An encoder that learns to ignore a
domain's style directions loses the identities of the domains living there,
which is what makes forgetting observable at desk scale. Each camera applies
a fixed affine perturbation on top and each sample adds isotropic noise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ucr.config.validators import (
    validate_int_at_least,
    validate_non_negative_real,
)
from ucr.core import Domain, Rng, Sample
from ucr.errors import ConfigError, DataError, FormatError
from ucr.evaluation import EvalSplit
from ucr.formats import read_features, write_features

logger = logging.getLogger(__name__)

DATASET_FORMAT = "ucr-dataset"
DATASET_VERSION = 1
INDEX_FILE = "index.json"

# Keys reserved in the Rng fork tree.
_CAMERA_KEY = 1_000
_UNSEEN_OFFSET = 10_000
_BASIS_KEY = 20_000


@dataclass(frozen=True)
class StreamSpec:
    """Knobs of a synthetic stream.

    Attributes:
        num_domains: Training domains in the stream
        ids_per_domain: Identities per domain (train and eval together)
        samples_per_id: Samples drawn per identity
        cameras_per_domain: Cameras per domain; samples cycle through them
        d_in: Raw feature dimension
        eval_ids: Identities per seen domain held out for query/gallery
        num_unseen: Extra domains generated for evaluation only
        latent_dim: Dimension of each domain's identity subspace
        identity_spread: Std of identity centroids inside that subspace
        style_shift: Std of per-sample style variation along the other seen
            domains' identity subspaces
        camera_shift: Strength of the per-camera affine perturbation
        domain_rotation: Angle (radians) by which each identity subspace is tilted
        domain_translation: Norm of the per-domain translation
        noise: Std of per-sample isotropic noise
        seed: Generation seed
    """

    num_domains: int = 3
    ids_per_domain: int = 30
    samples_per_id: int = 12
    cameras_per_domain: int = 3
    d_in: int = 32
    eval_ids: int = 10
    num_unseen: int = 2
    latent_dim: int = 6
    identity_spread: float = 1.0
    style_shift: float = 0.5
    camera_shift: float = 0.3
    domain_rotation: float = 0.3
    domain_translation: float = 1.0
    noise: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        checks = {
            "num_domains": validate_int_at_least(self.num_domains, 1),
            "ids_per_domain": validate_int_at_least(self.ids_per_domain, 1),
            "samples_per_id": validate_int_at_least(self.samples_per_id, 1),
            "cameras_per_domain": validate_int_at_least(self.cameras_per_domain, 1),
            "d_in": validate_int_at_least(self.d_in, 1),
            "eval_ids": validate_int_at_least(self.eval_ids, 0),
            "num_unseen": validate_int_at_least(self.num_unseen, 0),
            "latent_dim": validate_int_at_least(self.latent_dim, 1),
            "identity_spread": validate_non_negative_real(self.identity_spread),
            "style_shift": validate_non_negative_real(self.style_shift),
            "camera_shift": validate_non_negative_real(self.camera_shift),
            "domain_rotation": validate_non_negative_real(self.domain_rotation),
            "domain_translation": validate_non_negative_real(self.domain_translation),
            "noise": validate_non_negative_real(self.noise),
            "seed": validate_int_at_least(self.seed, 0),
        }
        for key, (is_valid, error) in checks.items():
            if not is_valid:
                raise ConfigError(error, key=key)
        if self.eval_ids >= self.ids_per_domain:
            raise ConfigError("must be smaller than ids_per_domain", key="eval_ids")
        if self.latent_dim > self.d_in:
            raise ConfigError("must not exceed d_in", key="latent_dim")


@dataclass
class DomainRecord:
    """A domain as stored on disk: all samples plus train/query/gallery indices."""

    name: str
    domain_id: int
    num_cameras: int
    features: np.ndarray
    camera_ids: np.ndarray
    gt_ids: np.ndarray
    train_indices: np.ndarray
    query_indices: np.ndarray
    gallery_indices: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.features)
        if len(self.camera_ids) != n or len(self.gt_ids) != n:
            raise DataError(f"domain {self.name!r}: camera_ids/gt_ids length differs from {n}")
        for label in ("train_indices", "query_indices", "gallery_indices"):
            indices = getattr(self, label)
            if len(indices) and (indices.min() < 0 or indices.max() >= n):
                raise DataError(f"domain {self.name!r}: {label} out of range")
        if len(self.camera_ids) and (
            self.camera_ids.min() < 0 or self.camera_ids.max() >= self.num_cameras
        ):
            raise DataError(f"domain {self.name!r}: camera out of range")

    def _samples(self, indices: np.ndarray) -> list[Sample]:
        return [
            Sample(
                features=self.features[i],
                domain_id=self.domain_id,
                camera_id=int(self.camera_ids[i]),
                gt_id=int(self.gt_ids[i]),
            )
            for i in indices
        ]

    def to_domain(self) -> Domain:
        """Training view; gt ids travel along but training never reads them."""
        return Domain(
            self.name, self._samples(self.train_indices), self.num_cameras, self.domain_id
        )

    def to_split(self) -> EvalSplit | None:
        if len(self.query_indices) == 0:
            return None
        return EvalSplit(
            self.name, self._samples(self.query_indices), self._samples(self.gallery_indices)
        )

    def manifest(self, feature_file: str) -> dict:
        return {
            "name": self.name,
            "domain_id": self.domain_id,
            "num_cameras": self.num_cameras,
            "feature_file": feature_file,
            "camera_ids": self.camera_ids.tolist(),
            "gt_ids": self.gt_ids.tolist(),
            "train_indices": self.train_indices.tolist(),
            "query_indices": self.query_indices.tolist(),
            "gallery_indices": self.gallery_indices.tolist(),
        }


@dataclass
class Stream:
    """Seen (trainable) and unseen (evaluation-only) domains."""

    d_in: int
    seen: list[DomainRecord] = field(default_factory=list)
    unseen: list[DomainRecord] = field(default_factory=list)

    def train_domains(self, reverse: bool = False) -> list[Domain]:
        records = list(reversed(self.seen)) if reverse else self.seen
        return [r.to_domain() for r in records]

    def seen_splits(self) -> list[EvalSplit]:
        return [s for s in (r.to_split() for r in self.seen) if s is not None]

    def unseen_splits(self) -> list[EvalSplit]:
        return [s for s in (r.to_split() for r in self.unseen) if s is not None]

    def split(self, name: str) -> EvalSplit:
        for record in self.seen + self.unseen:
            if record.name == name:
                split = record.to_split()
                if split is None:
                    break
                return split
        raise DataError(f"no evaluation split named {name!r}")


def _rotation(d: int, angle: float, rng: Rng) -> np.ndarray:
    """Rotate ``angle`` radians in floor(d/2) random disjoint coordinate planes."""
    rotation = np.eye(d)
    perm = rng.permutation(d)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(d // 2):
        a, b = perm[2 * i], perm[2 * i + 1]
        rotation[a, a], rotation[a, b] = c, -s
        rotation[b, a], rotation[b, b] = s, c
    return rotation


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


def _identity_bases(spec: StreamSpec) -> list[np.ndarray]:
    """Orthonormal ``(d_in, latent_dim)`` identity basis of every domain, seen first.

    Domain ``i`` takes the next ``latent_dim`` columns of a shared random
    orthonormal frame, wrapping around once the frame is used up, and tilts
    them by ``domain_rotation``.
    """
    d, r = spec.d_in, spec.latent_dim
    rng = Rng(spec.seed).fork(_BASIS_KEY)
    frame = np.linalg.qr(rng.normal(size=(d, d)))[0]
    bases = []
    for index in range(spec.num_domains + spec.num_unseen):
        columns = (np.arange(r) + index * r) % d
        tilt = _rotation(d, spec.domain_rotation, rng.fork(index))
        bases.append(tilt @ frame[:, columns])
    return bases


def _generate_domain(
    spec: StreamSpec,
    name: str,
    domain_id: int,
    rng: Rng,
    id_offset: int,
    eval_ids: int,
    basis: np.ndarray,
    style: np.ndarray,
) -> DomainRecord:
    d = spec.d_in
    centroids = rng.normal(0.0, spec.identity_spread, (spec.ids_per_domain, spec.latent_dim))
    translation = spec.domain_translation * _unit(rng.normal(size=d))
    latent = centroids @ basis.T + translation

    camera_rng = rng.fork(_CAMERA_KEY)
    scale = spec.camera_shift / np.sqrt(d)
    transforms = [
        (
            np.eye(d) + scale * camera_rng.normal(size=(d, d)),
            spec.camera_shift * _unit(camera_rng.normal(size=d)),
        )
        for _ in range(spec.cameras_per_domain)
    ]

    rows, cameras, gt_ids = [], [], []
    for identity in range(spec.ids_per_domain):
        for j in range(spec.samples_per_id):
            camera = j % spec.cameras_per_domain
            matrix, shift = transforms[camera]
            # Style never leaks into the domain's own identity subspace.
            offset = style @ rng.normal(0.0, spec.style_shift, style.shape[1])
            offset -= basis @ (basis.T @ offset)
            point = latent[identity] + offset
            rows.append(matrix @ point + shift + rng.normal(0.0, spec.noise, d))
            cameras.append(camera)
            gt_ids.append(id_offset + identity)

    gt = np.array(gt_ids, dtype=np.int64)
    per_id = np.arange(len(gt)) % spec.samples_per_id
    is_eval = gt >= id_offset + spec.ids_per_domain - eval_ids
    return DomainRecord(
        name=name,
        domain_id=domain_id,
        num_cameras=spec.cameras_per_domain,
        features=np.stack(rows).astype(np.float32),
        camera_ids=np.array(cameras, dtype=np.int64),
        gt_ids=gt,
        train_indices=np.flatnonzero(~is_eval),
        query_indices=np.flatnonzero(is_eval & (per_id == 0)),
        gallery_indices=np.flatnonzero(is_eval & (per_id > 0)),
    )


def generate_stream(spec: StreamSpec) -> Stream:
    """Generate seen and unseen domains deterministically from ``spec.seed``.

    Seen domains keep their last ``eval_ids`` identities for evaluation: the
    first sample of such an identity is the query and the rest form the
    gallery. Unseen domains hold evaluation identities only. The style
    variation of every domain spans the identity subspaces of all other
    seen domains.
    """
    root = Rng(spec.seed)
    bases = _identity_bases(spec)
    stream = Stream(spec.d_in)
    for index in range(spec.num_domains + spec.num_unseen):
        seen = index < spec.num_domains
        name = f"seen_{index}" if seen else f"unseen_{index - spec.num_domains}"
        key = index if seen else _UNSEEN_OFFSET + index
        others = [bases[k] for k in range(spec.num_domains) if k != index]
        style = np.hstack(others) if others else np.zeros((spec.d_in, 0))
        record = _generate_domain(
            spec,
            name,
            domain_id=index,
            rng=root.fork(key),
            id_offset=index * spec.ids_per_domain,
            eval_ids=spec.eval_ids if seen else spec.ids_per_domain,
            basis=bases[index],
            style=style,
        )
        (stream.seen if seen else stream.unseen).append(record)
    logger.info(
        "generated %d seen and %d unseen domains (%d samples)",
        len(stream.seen),
        len(stream.unseen),
        sum(len(r.features) for r in stream.seen + stream.unseen),
    )
    return stream


def write_dataset(stream: Stream, path: Path | str) -> None:
    """Write ``index.json`` plus one manifest and one feature file per domain."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FormatError(f"cannot create {root}: {e}") from e
    index = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "d_in": stream.d_in,
        "seen": [],
        "unseen": [],
    }
    for group, records in (("seen", stream.seen), ("unseen", stream.unseen)):
        for record in records:
            feature_file = f"{record.name}.ucrf"
            manifest_file = f"{record.name}.json"
            write_features(record.features, root / feature_file)
            _write_json(root / manifest_file, record.manifest(feature_file))
            index[group].append(manifest_file)
    _write_json(root / INDEX_FILE, index)


def _write_json(path: Path, data: dict) -> None:
    try:
        path.write_text(json.dumps(data, indent=2) + "\n")
    except OSError as e:
        raise FormatError(f"cannot write {path}: {e}") from e


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"missing dataset file: {path}")
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise FormatError(f"{path} must hold a JSON object")
    return data


def _read_record(root: Path, manifest_file: str, d_in: int) -> DomainRecord:
    manifest = _read_json(root / manifest_file)
    try:
        features = read_features(root / manifest["feature_file"])
        if features.shape[1] != d_in:
            raise DataError(
                f"dimension mismatch in {manifest_file}: expected {d_in}, got {features.shape[1]}"
            )
        return DomainRecord(
            name=manifest["name"],
            domain_id=int(manifest["domain_id"]),
            num_cameras=int(manifest["num_cameras"]),
            features=features,
            camera_ids=np.array(manifest["camera_ids"], dtype=np.int64),
            gt_ids=np.array(manifest["gt_ids"], dtype=np.int64),
            train_indices=np.array(manifest["train_indices"], dtype=np.int64),
            query_indices=np.array(manifest["query_indices"], dtype=np.int64),
            gallery_indices=np.array(manifest["gallery_indices"], dtype=np.int64),
        )
    except KeyError as e:
        raise FormatError(f"{manifest_file} lacks field {e.args[0]!r}") from e


def read_dataset(path: Path | str) -> Stream:
    """Load a dataset directory written by :func:`write_dataset`.

    Raises:
        DataError: If files are missing or indices are inconsistent.
        FormatError: If the index or a feature file cannot be decoded.
    """
    root = Path(path)
    index = _read_json(root / INDEX_FILE)
    if index.get("format") != DATASET_FORMAT:
        raise FormatError(f"{root / INDEX_FILE}: bad magic")
    if index.get("version") != DATASET_VERSION:
        raise FormatError(f"unsupported version {index.get('version')}")
    try:
        d_in = int(index["d_in"])
        stream = Stream(d_in)
        stream.seen = [_read_record(root, m, d_in) for m in index["seen"]]
        stream.unseen = [_read_record(root, m, d_in) for m in index["unseen"]]
    except KeyError as e:
        raise FormatError(f"{root / INDEX_FILE} lacks field {e.args[0]!r}") from e
    return stream
