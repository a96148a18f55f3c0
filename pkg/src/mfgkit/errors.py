"""Exception hierarchy shared by every mfgkit module."""


class MfgError(Exception):
    """Base class for all mfgkit errors."""


class StructuralError(MfgError, ValueError):
    """Grid, horizon or index mismatch between objects that must agree."""


class DomainError(MfgError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ModelIntegrityError(MfgError):
    """A user-supplied kernel or cost violates its contract."""


class StabilityError(MfgError):
    """Growth constants violate alpha * beta * gamma < 1."""


class ConfigurationError(MfgError, ValueError):
    """A model or run configuration cannot be realized."""


class NumericError(MfgError, ArithmeticError):
    """NaN or infinite values reached a numerical routine."""
