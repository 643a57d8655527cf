"""Exception types shared across the package."""


class NadsError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(NadsError, ValueError):
    """Tensor shape or dimensionality mismatch."""


class ConfigError(NadsError, ValueError):
    """Invalid parameter or configuration value."""


class DataError(NadsError, ValueError):
    """Malformed or out-of-contract input data."""


class NumericError(NadsError, ArithmeticError):
    """Non-finite intermediate or numerically singular quantity."""


class UsageError(NadsError, RuntimeError):
    """API called out of order or with the wrong kind of argument."""


class NotInitializedError(UsageError):
    """Data-dependent layer used before its initialization pass."""


class CapacityError(NadsError, ValueError):
    """Requested exact computation exceeds the enumerable size limit."""
