"""Exception types shared across the pipeline."""


class SecureLinkError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(SecureLinkError):
    """An operation received data outside its contract (non-finite, empty, ...)."""


class DegenerateFitError(SecureLinkError):
    """Least-squares fit has no unique solution (all subcarrier indices equal)."""


class SchemaError(SecureLinkError):
    """A record is missing a required field or violates the ingestion schema."""


class ShapeError(SecureLinkError):
    """Array shapes do not match the operation's contract."""


class ConfigError(SecureLinkError):
    """A configuration value is invalid or unknown."""


class NormalizationError(SecureLinkError):
    """A zero vector cannot be normalized to unit length."""


class StateError(SecureLinkError):
    """Operation called in the wrong state (e.g. backward without a forward)."""


class DataError(SecureLinkError):
    """Dataset does not satisfy the preconditions of the requested operation."""


class ConvergenceError(SecureLinkError):
    """Iterative solver hit its iteration cap before reaching tolerance."""


class ConflictError(SecureLinkError):
    """Attempt to register an ID that already exists without overwrite."""


class UnknownIdError(SecureLinkError):
    """Authentication request for an ID that is not in the registry."""
