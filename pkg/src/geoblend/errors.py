class GeoblendError(Exception):
    """Root of every error raised by the geoblend library."""


class ArgumentError(GeoblendError, ValueError):
    """Raised for malformed arguments: size mismatches, bad intervals, missing parameters."""


class DomainError(GeoblendError, ValueError):
    """
    Raised when an input lies outside the mathematical domain of an operation.

    :param message: Human readable description.
    :param index: Optional node or pivot index where the violation was found.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class NotPositiveDefiniteError(DomainError):
    """Raised when a sparse factorization meets a non-positive pivot."""


class ConfigError(GeoblendError):
    """Raised for invalid experiment configurations and unknown presets."""


class FieldFormatError(ConfigError):
    """Raised when a field file header or payload cannot be parsed."""
