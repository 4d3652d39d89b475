"""Exception types shared across the package."""


class SatdownError(Exception):
    """Base class for all package errors."""


class ValidationError(SatdownError, ValueError):
    """An input violates a documented invariant or precondition."""


class FormatError(SatdownError):
    """A file is not in the documented container/CSV format."""


class OutOfDomainError(SatdownError):
    """A query coordinate lies outside the field's coordinate span."""


class MaskedValueError(SatdownError):
    """A point query touches only masked (invalid) cells."""


class MissingArtifactError(SatdownError):
    """A required upstream artifact (checkpoint, dataset) does not exist."""


class ConfigError(SatdownError):
    """A run configuration is malformed or inconsistent."""
