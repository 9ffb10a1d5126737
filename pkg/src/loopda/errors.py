class LoopDAError(Exception):
    """Base class for errors raised by loopda."""


class DimensionError(LoopDAError, ValueError):
    pass


class BlowUpError(LoopDAError, FloatingPointError):
    """A model integration produced a non-finite state."""

    def __init__(self, message, step=None, window=None):
        super().__init__(message)
        self.step = step
        self.window = window


class SingularMatrixError(LoopDAError, ArithmeticError):
    pass


class ConfigError(LoopDAError, ValueError):
    pass
