"""Exception types shared across the package."""


class FkinError(Exception):
    """Base class for all package errors."""


class ParameterError(FkinError, ValueError):
    """A numeric parameter is outside its admissible range."""


class StepSizeError(FkinError, ValueError):
    """A step size violates a stability or positivity precondition."""


class PositivityError(FkinError, RuntimeError):
    """A density became negative during time stepping."""


class HorizonError(FkinError, RuntimeError):
    """A time horizon was exhausted before the requested event occurred."""


class QuadratureError(FkinError, RuntimeError):
    """A quadrature did not reach the requested tolerance."""


class StatisticsError(FkinError, RuntimeError):
    """A statistical estimate is degenerate (too few samples, empty bins)."""


class ConfigError(FkinError, ValueError):
    """An experiment configuration is invalid."""
