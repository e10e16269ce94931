"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class RankError(ValueError):
    """Requested adapter rank is invalid for the weight it adapts."""


class ConfigError(ValueError):
    """A method, mode or run configuration is inconsistent."""


class ProtocolError(RuntimeError):
    """Continual-learning stages were driven out of order or incompletely."""


class StateError(RuntimeError):
    """Importance statistics were updated without the inputs they need."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
