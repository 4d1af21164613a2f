"""Exception types shared across the package."""


class WaflError(Exception):
    """Base class for all errors raised by waflae."""


class ShapeError(WaflError, ValueError):
    """Array or vector dimensions do not match what an operation expects."""


class FormatError(WaflError, ValueError):
    """A file or byte stream does not follow its declared format."""


class ConfigError(WaflError, ValueError):
    """Invalid configuration value or inconsistent configuration."""
