"""Exception hierarchy shared by every module.

Each class maps to one CLI exit code family: configuration problems (2),
bad or unusable data (3) and numeric failures (4).
"""


class ReverbT60Error(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidArgumentError(ReverbT60Error, ValueError):
    exit_code = 3


class ConfigurationError(ReverbT60Error, ValueError):
    exit_code = 2


class UnreachableTargetError(ReverbT60Error, ValueError):
    """Requested T60 cannot be produced with absorption below 0.999."""

    exit_code = 3


class MeasurementFailedError(ReverbT60Error):
    """Deconvolution produced no detectable direct-path peak."""

    exit_code = 3


class InsufficientDecayError(ReverbT60Error):
    """The energy decay curve never reaches the required level."""

    exit_code = 3


class UndefinedCorrelationError(ReverbT60Error, ValueError):
    exit_code = 4


class UnbalancedDesignError(ReverbT60Error, ValueError):
    exit_code = 3


class TrainingDivergedError(ReverbT60Error, FloatingPointError):
    exit_code = 4

