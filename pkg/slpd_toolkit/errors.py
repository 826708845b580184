"""Exception hierarchy for the SLPD toolkit."""
from __future__ import annotations


class SlpdError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(SlpdError, ValueError):
    """Invalid configuration values or command-line flags."""


class DataError(SlpdError, ValueError):
    """Input data violates a dataset-level invariant."""


class DatasetFileNotFoundError(DataError, FileNotFoundError):
    """A manifest or per-slide file referenced by a dataset does not exist."""


class FormatError(DataError):
    """A binary file has the wrong magic bytes, version or length."""


class DimensionMismatchError(DataError):
    """Vectors that must share a dimension do not."""


class NonFiniteValueError(DataError):
    """A NaN or infinite value was found where finite values are required."""


class ClusteringError(DataError):
    """Too few points to form the requested number of prototypes."""


class CardinalityMismatchError(DataError):
    """Prototype sets that must share M do not."""


class EvaluationError(DataError):
    """Evaluation inputs are degenerate (single class, empty folds, bad k)."""


class NumericError(SlpdError, ArithmeticError):
    """A numeric computation failed or produced an invalid result."""


class ZeroNormError(NumericError):
    """Cosine similarity requested for a zero-norm vector."""


__all__ = [
    "SlpdError",
    "ConfigurationError",
    "DataError",
    "DatasetFileNotFoundError",
    "FormatError",
    "DimensionMismatchError",
    "NonFiniteValueError",
    "ClusteringError",
    "CardinalityMismatchError",
    "EvaluationError",
    "NumericError",
    "ZeroNormError",
]
