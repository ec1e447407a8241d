"""Hyperparameter configuration and JSON persistence."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from ucr.config.validators import (
    validate_batch_spec,
    validate_choice,
    validate_dims,
    validate_eps,
    validate_flag,
    validate_int_at_least,
    validate_non_negative_real,
    validate_positive_real,
    validate_unit_interval,
)
from ucr.errors import ConfigError


class BaselineVariant(str, Enum):
    """Current-domain objective used alongside the cluster prototype loss."""

    CLUSTER_ONLY = "cluster_only"
    CLUSTER_HARD = "cluster+hard"
    CLUSTER_CAM = "cluster+cam"


class MemoryPolicy(str, Enum):
    """How K_mem images are chosen per cluster when a domain is committed."""

    NEAREST = "nearest"
    FARTHEST = "farthest"
    RANDOM = "random"


@dataclass(frozen=True)
class HyperParams:
    """All training hyperparameters.

    Defaults reproduce the reference configuration at full scale; see
    ``configs/desk.json`` for the reduced-scale overrides.

    Attributes:
        alpha: EMA coefficient of the momentum encoder
        tau_p: Prototype temperature
        tau_c: Camera prototype temperature
        tau_s: Image-to-image similarity temperature
        lambda_cam: Weight of the camera prototype loss
        lambda_sim: Weight of the similarity constraint
        n_neg: Hardest negative camera prototypes per anchor
        k_mem: Images stored per cluster in the image memory
        batch_current: (identities, images per identity) of the current batch
        batch_old: (identities, images per identity) of the rehearsal batch
        dbscan_eps: DBSCAN distance threshold on the Jaccard distance
        dbscan_min_pts: Minimum cluster size
        rerank_k1: k-reciprocal neighborhood size
        rerank_k2: Local query expansion size
        baseline_variant: Current-domain objective
        memory_policy: Image memory selection rule
        use_old: Enable the old-domain rehearsal loss
        use_sim: Enable the similarity constraint
        normalize_prototypes: L2-normalize prototype means
        reembed_old_each_iter: Recompute momentum embeddings of the rehearsal
            batch every iteration instead of once per epoch
    """

    alpha: float = 0.999
    tau_p: float = 0.5
    tau_c: float = 0.07
    tau_s: float = 0.2
    lambda_cam: float = 0.5
    lambda_sim: float = 20.0
    n_neg: int = 50
    k_mem: int = 2
    batch_current: tuple[int, int] = (8, 4)
    batch_old: tuple[int, int] = (16, 2)
    dbscan_eps: float = 0.55
    dbscan_min_pts: int = 4
    rerank_k1: int = 30
    rerank_k2: int = 6
    lr: float = 3.5e-4
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    epochs_per_domain: int = 30
    iters_per_epoch: int = 400
    baseline_variant: str = BaselineVariant.CLUSTER_CAM.value
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)
    d_emb: int = 32
    memory_policy: str = MemoryPolicy.NEAREST.value
    use_old: bool = True
    use_sim: bool = True
    normalize_prototypes: bool = True
    reembed_old_each_iter: bool = True

    def __post_init__(self) -> None:
        # JSON gives lists; keep tuples so instances hash and compare cleanly
        for name in ("batch_current", "batch_old", "hidden_dims"):
            value = getattr(self, name)
            if isinstance(value, list):
                object.__setattr__(self, name, tuple(value))
        for name, value in (
            ("baseline_variant", self.baseline_variant),
            ("memory_policy", self.memory_policy),
        ):
            if isinstance(value, Enum):
                object.__setattr__(self, name, value.value)
        is_valid, key, error = check_hyperparams(self)
        if not is_valid:
            raise ConfigError(error, key=key)

    @property
    def variant(self) -> BaselineVariant:
        return BaselineVariant(self.baseline_variant)

    @property
    def policy(self) -> MemoryPolicy:
        return MemoryPolicy(self.memory_policy)

    def replace(self, **overrides) -> HyperParams:
        """Return a copy with ``overrides`` applied; ``None`` values are ignored.

        Example:
            >>> HyperParams().replace(k_mem=8, seed=None).k_mem
            8
        """
        changes = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError("unknown key", key=sorted(unknown)[0])
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        """JSON-ready mapping keyed by field name."""
        data = dataclasses.asdict(self)
        for name in ("batch_current", "batch_old", "hidden_dims"):
            data[name] = list(data[name])
        return data


_CHECKS = {
    "alpha": validate_unit_interval,
    "tau_p": validate_positive_real,
    "tau_c": validate_positive_real,
    "tau_s": validate_positive_real,
    "lambda_cam": validate_non_negative_real,
    "lambda_sim": validate_non_negative_real,
    "n_neg": lambda v: validate_int_at_least(v, 1),
    "k_mem": lambda v: validate_int_at_least(v, 1),
    "batch_current": validate_batch_spec,
    "batch_old": validate_batch_spec,
    "dbscan_eps": validate_eps,
    "dbscan_min_pts": lambda v: validate_int_at_least(v, 2),
    "rerank_k1": lambda v: validate_int_at_least(v, 1),
    "rerank_k2": lambda v: validate_int_at_least(v, 1),
    "lr": validate_positive_real,
    "weight_decay": validate_non_negative_real,
    "warmup_epochs": lambda v: validate_int_at_least(v, 0),
    "epochs_per_domain": lambda v: validate_int_at_least(v, 1),
    "iters_per_epoch": lambda v: validate_int_at_least(v, 1),
    "baseline_variant": lambda v: validate_choice(
        v, tuple(m.value for m in BaselineVariant)
    ),
    "seed": lambda v: validate_int_at_least(v, 0),
    "hidden_dims": validate_dims,
    "d_emb": lambda v: validate_int_at_least(v, 1),
    "memory_policy": lambda v: validate_choice(v, tuple(m.value for m in MemoryPolicy)),
    "use_old": validate_flag,
    "use_sim": validate_flag,
    "normalize_prototypes": validate_flag,
    "reembed_old_each_iter": validate_flag,
}


def check_hyperparams(hp: HyperParams) -> tuple[bool, str, str]:
    """Run every field check.

    Returns:
        Tuple of (is_valid, key, error_message) for the first failing field.
        If valid, key and error_message are empty strings.
    """
    for key, check in _CHECKS.items():
        is_valid, error = check(getattr(hp, key))
        if not is_valid:
            return False, key, error
    if hp.rerank_k2 > hp.rerank_k1:
        return False, "rerank_k2", "must not exceed rerank_k1"
    return True, "", ""


class ConfigManager:
    """Loads and saves HyperParams as a JSON object.

    Attributes:
        config_path: Path to the JSON configuration file
    """

    def __init__(self, config_path: Path | str):
        """Initialize the config manager.

        Args:
            config_path: Location of the JSON file
        """
        self.config_path = Path(config_path)

    def load(self) -> HyperParams:
        """Load hyperparameters, filling omitted keys with defaults.

        Raises:
            ConfigError: If the file is missing, is not a JSON object, names an
                unknown key or holds an invalid value.

        Example:
            >>> hp = ConfigManager("configs/desk.json").load()
        """
        if not self.config_path.exists():
            raise ConfigError(f"config file not found: {self.config_path}")
        try:
            data = json.loads(self.config_path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot parse {self.config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{self.config_path} must hold a JSON object")

        known = {f.name for f in dataclasses.fields(HyperParams)}
        for key in data:
            if key not in known:
                raise ConfigError("unknown key", key=key)
        try:
            return HyperParams(**data)
        except TypeError as e:
            raise ConfigError(f"malformed value: {e}") from e

    def save(self, hp: HyperParams) -> None:
        """Write every field of ``hp``, creating parent directories.

        Raises:
            ConfigError: If the file cannot be written
        """
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.config_path.write_text(json.dumps(hp.to_dict(), indent=2) + "\n")
        except OSError as e:
            raise ConfigError(f"failed to save config to {self.config_path}: {e}") from e


def load_config(path: Path | str) -> HyperParams:
    return ConfigManager(path).load()


def write_config(hp: HyperParams, path: Path | str) -> None:
    ConfigManager(path).save(hp)
