"""Exception types shared across the toolkit."""


class RedError(Exception):
    """Base class for toolkit errors."""


class ShapeError(RedError, ValueError):
    """Operand shapes do not conform."""


class InvalidArchitectureError(RedError, ValueError):
    """A layer stack cannot process the requested input length.

    ``stage`` is the 1-based index of the first encoder stage that fails,
    or ``None`` when the failure is not tied to a stage.
    """

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class NonFiniteError(RedError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(RedError, ValueError):
    """A configuration is malformed or violates its invariants."""


class FormatError(RedError, ValueError):
    """A binary file does not match the expected layout."""
