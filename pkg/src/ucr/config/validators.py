"""Input validation for hyperparameter values."""

from __future__ import annotations

import math
from numbers import Real


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value) -> bool:
    return isinstance(value, Real) and not isinstance(value, bool)


def validate_positive_real(value) -> tuple[bool, str]:
    """Validate a strictly positive finite real (temperatures, learning rate).

    Example:
        >>> validate_positive_real(0.5)
        (True, "")
        >>> validate_positive_real(0)
        (False, "must be > 0")
    """
    if not _is_real(value) or not math.isfinite(value):
        return False, "must be a finite number"
    if value <= 0:
        return False, "must be > 0"
    return True, ""


def validate_non_negative_real(value) -> tuple[bool, str]:
    """Validate a finite real >= 0 (loss weights, weight decay)."""
    if not _is_real(value) or not math.isfinite(value):
        return False, "must be a finite number"
    if value < 0:
        return False, "must be >= 0"
    return True, ""


def validate_unit_interval(value) -> tuple[bool, str]:
    """Validate a real in [0, 1].

    Example:
        >>> validate_unit_interval(1.5)
        (False, "out of range")
    """
    if not _is_real(value) or not math.isfinite(value):
        return False, "must be a finite number"
    if not 0.0 <= value <= 1.0:
        return False, "out of range"
    return True, ""


def validate_eps(value) -> tuple[bool, str]:
    """Validate a DBSCAN distance threshold in (0, 1]."""
    if not _is_real(value) or not math.isfinite(value):
        return False, "must be a finite number"
    if not 0.0 < value <= 1.0:
        return False, "out of range"
    return True, ""


def validate_int_at_least(value, minimum: int) -> tuple[bool, str]:
    """Validate an integer >= ``minimum``.

    Example:
        >>> validate_int_at_least(1, minimum=2)
        (False, "must be an integer >= 2")
    """
    if not _is_int(value) or value < minimum:
        return False, f"must be an integer >= {minimum}"
    return True, ""


def validate_batch_spec(value) -> tuple[bool, str]:
    """Validate an (ids, images_per_id) pair of positive integers."""
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        return False, "must be a pair [ids, images_per_id]"
    if not all(_is_int(v) and v > 0 for v in value):
        return False, "batch sizes must be positive integers"
    return True, ""


def validate_dims(value) -> tuple[bool, str]:
    """Validate a list of hidden layer widths."""
    if not isinstance(value, (list, tuple)):
        return False, "must be a list of layer widths"
    if not all(_is_int(v) and v > 0 for v in value):
        return False, "layer widths must be positive integers"
    return True, ""


def validate_choice(value, choices: tuple[str, ...]) -> tuple[bool, str]:
    """Validate a string against a fixed set of names."""
    if value not in choices:
        return False, f"must be one of {', '.join(choices)}"
    return True, ""


def validate_flag(value) -> tuple[bool, str]:
    if not isinstance(value, bool):
        return False, "must be true or false"
    return True, ""
