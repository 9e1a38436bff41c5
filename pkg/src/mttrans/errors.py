class MTTransError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(MTTransError, ValueError):
    pass


class FormatError(MTTransError, ValueError):
    """On-disk data (manifest, checkpoint, config) does not match its schema."""


class DomainError(MTTransError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class StateError(MTTransError, RuntimeError):
    """Model or parameter state is inconsistent (shape or name mismatch)."""


class UsageError(MTTransError, RuntimeError):
    pass


class CapacityError(MTTransError, ValueError):
    """More targets than object queries."""
