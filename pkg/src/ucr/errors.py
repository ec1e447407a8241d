"""Exception hierarchy shared by every ucr module."""


class UCRError(Exception):
    """Base class for all errors raised by ucr."""


class ConfigError(UCRError):
    """A configuration file or value is missing, malformed or out of range.

    Attributes:
        key: Name of the offending HyperParams field (None for file-level errors)
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class DataError(UCRError):
    """Input samples, domains or splits violate their invariants."""


class FormatError(UCRError):
    """A binary or JSON artifact on disk cannot be decoded."""


class TrainingError(UCRError):
    """Training could not proceed."""


class EmptyClusteringError(TrainingError):
    """Pseudo-labeling produced zero clusters."""


class DegeneratePrototypeError(TrainingError):
    """A cluster's members average to (numerically) the zero vector."""


class LossInputError(UCRError):
    """A loss received labels or indices it cannot score."""


class EvaluationError(UCRError):
    """Retrieval evaluation has nothing to score."""
