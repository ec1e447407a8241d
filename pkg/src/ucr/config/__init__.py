"""Hyperparameter configuration package."""

from ucr.config.hyperparams import (
    BaselineVariant,
    ConfigManager,
    HyperParams,
    MemoryPolicy,
    check_hyperparams,
    load_config,
    write_config,
)

__all__ = [
    "BaselineVariant",
    "ConfigManager",
    "HyperParams",
    "MemoryPolicy",
    "check_hyperparams",
    "load_config",
    "write_config",
]
