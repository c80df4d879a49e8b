"""Exception hierarchy. The CLI maps each family to an exit code."""

from .numerics.gradcheck import NonFiniteLossError
from .numerics.tensor import ShapeError


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class StructuralError(ValueError):
    """Mismatched model structure: level counts, parameter shapes, names."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class DataError(IOError):
    """Corrupt or unreadable data artifact (exit code 3)."""


class BadMagicError(DataError):
    pass


class VersionMismatchError(DataError):
    pass


class TruncatedError(DataError):
    pass


class ChecksumError(DataError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class NameCollisionError(DataError):
    pass


class VocabularyError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Non-finite values in training or checking (exit code 4)."""


__all__ = [
    "BadMagicError", "ChecksumError", "ConfigError", "ConvergenceError", "DataError",
    "NameCollisionError", "NonFiniteLossError", "NumericError", "ShapeError",
    "StructuralError", "TruncatedError", "VersionMismatchError", "VocabularyError",
]
