class MscaNetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MscaNetError, ValueError):
    """Invalid configuration (channel counts, block placement, hyperparameters)."""


class ShapeError(MscaNetError, ValueError):
    pass


class NumericError(MscaNetError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class LoadError(MscaNetError, OSError):
    pass


class UndefinedMetricError(MscaNetError, ZeroDivisionError):
    """A metric whose denominator is zero for the whole dataset (e.g. Pd with no targets)."""
