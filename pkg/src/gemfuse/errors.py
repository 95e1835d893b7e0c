"""Exception types shared across the package."""


class GemError(Exception):
    """Base class for all package errors."""


class InvalidParameter(GemError, ValueError):
    pass


class InvalidShape(GemError, ValueError):
    pass


class InvalidInput(GemError, ValueError):
    pass


class NonFiniteError(GemError, ArithmeticError):
    """Raised when a forward op produces NaN or Inf."""


class EstimationFailed(GemError, RuntimeError):
    pass


class TrainingDiverged(GemError, RuntimeError):
    pass


class ConfigError(GemError, ValueError):
    pass
