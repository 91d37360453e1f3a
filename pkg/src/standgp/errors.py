"""Exception types shared across the package."""


class StandGPError(Exception):
    """Base class for all errors raised by standgp."""


class DomainError(StandGPError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class SingularCovarianceError(StandGPError):
    """A covariance matrix could not be factorized."""


class DataError(StandGPError):
    """Input data is malformed or inconsistent."""


class ConfigError(StandGPError):
    """A run configuration is invalid."""


class NumericError(StandGPError):
    """A numeric failure that is not recoverable (overflow, non-finite target)."""


class InitializationError(NumericError):
    """The sampler could not start from the supplied state."""
