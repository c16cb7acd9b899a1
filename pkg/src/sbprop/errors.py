"""Exception types shared across the package."""


class SbpropError(Exception):
    """Base class for package errors."""


class ShapeError(SbpropError, ValueError):
    """Operands have incompatible or unexpected shapes."""


class ConfigError(SbpropError, ValueError):
    """Invalid configuration value or unknown identifier."""


class ContractError(SbpropError, RuntimeError):
    """A documented precondition between components was violated."""


class StateError(SbpropError, RuntimeError):
    """Operation invoked in the wrong lifecycle state."""


class NumericsError(SbpropError, FloatingPointError):
    """A kernel produced non-finite values."""
