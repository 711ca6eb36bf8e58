"""Exception types shared across the package."""


class EngaeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EngaeError, ValueError):
    """Inconsistent hyperparameters or layer shapes."""


class InputError(EngaeError, ValueError):
    """Data of the wrong shape, length or content."""


class FormatError(EngaeError, ValueError):
    """A file on disk does not match its declared format."""


class ProtocolError(EngaeError):
    """The normal-only training/thresholding protocol was violated."""


class UsageError(EngaeError, RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""
