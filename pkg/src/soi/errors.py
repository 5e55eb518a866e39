"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI lives in ``soi.cli``.
"""


class SoiError(Exception):
    """Base class for all package errors."""


class ConfigError(SoiError):
    """Invalid or unknown configuration keys/values."""


class ShapeError(SoiError):
    """Operand shapes violate an operation's contract."""


class DomainError(SoiError):
    """Input value outside an operation's mathematical domain."""


class ZeroNormError(DomainError):
    """Normalization requested for a zero-norm vector."""


class NumericFault(SoiError):
    """NaN/Inf detected in a committed value or gradient."""


class DataError(SoiError):
    """Bad input data: unreadable manifest, empty pool, duplicate ids."""


class CheckpointError(SoiError):
    """Malformed, truncated, or version-incompatible checkpoint file."""
