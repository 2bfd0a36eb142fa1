"""Exception types raised across the package."""


class FBUNetError(Exception):
    """Base class for all library errors."""


class ShapeError(FBUNetError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(FBUNetError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigError(FBUNetError, ValueError):
    """A configuration value is invalid."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(FBUNetError, ValueError):
    """Dataset contents violate an expectation (bad labels, missing classes)."""


class FormatError(FBUNetError, ValueError):
    """A file could not be parsed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
