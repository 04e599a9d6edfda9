"""Exception hierarchy shared by every stage of the pipeline."""


class MS2SError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MS2SError, ValueError):
    """Operand shapes do not agree."""


class ConfigError(MS2SError, ValueError):
    """Invalid configuration value or combination."""


class InputError(MS2SError, ValueError):
    """Input data violates an operation's precondition."""


class FormatError(MS2SError, ValueError):
    """A file could not be parsed."""


class NonFiniteError(MS2SError, ArithmeticError):
    """A forward op produced NaN or Inf."""


class UsageError(MS2SError, RuntimeError):
    """An API was called in an unsupported way."""


class TrainingError(MS2SError, RuntimeError):
    """Optimization diverged or received unusable gradients."""
