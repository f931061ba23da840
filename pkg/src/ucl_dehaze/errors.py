"""Exception types raised across the package."""


class UCLDehazeError(Exception):
    """Base class for all package errors."""


class ConfigError(UCLDehazeError, ValueError):
    """Invalid configuration value, key, or layer selection."""


class DimensionError(UCLDehazeError, ValueError):
    """Image or feature map has an unsupported shape."""


class InputError(UCLDehazeError, ValueError):
    """Input data is non-finite, undecodable or otherwise unusable."""


class NonFiniteLossError(UCLDehazeError, FloatingPointError):
    """A loss component evaluated to NaN or infinity."""

    def __init__(self, component, value):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component
        self.value = value


class IntegrityError(UCLDehazeError):
    """Checkpoint payload does not match its recorded hash."""


class VersionError(UCLDehazeError):
    """Checkpoint format version is not supported."""
