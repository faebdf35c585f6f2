"""Exception types shared across the package."""


class ConfigError(ValueError):
    """An invalid configuration value or combination."""


class ShapeError(ValueError):
    """Array dimensions do not match what the operation requires."""


class FormatError(ValueError):
    """A file or record does not conform to the expected schema."""


class StateError(RuntimeError):
    """An operation was called in an order its state does not allow."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""
