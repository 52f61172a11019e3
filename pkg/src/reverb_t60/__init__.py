"""Noise-aware blind reverberation time (T60) estimation from noisy speech."""

from .estimator import MagnitudeSpectrogram, NoiseAwareT60Estimator, load_bundle, save_bundle
from .exceptions import (ConfigurationError, InsufficientDecayError, InvalidArgumentError,
                         MeasurementFailedError, ReverbT60Error, TrainingDivergedError,
                         UnbalancedDesignError, UndefinedCorrelationError,
                         UnreachableTargetError)

__version__ = "0.1.0"

__all__ = [
    "MagnitudeSpectrogram", "NoiseAwareT60Estimator", "load_bundle", "save_bundle",
    "ConfigurationError", "InsufficientDecayError", "InvalidArgumentError",
    "MeasurementFailedError", "ReverbT60Error", "TrainingDivergedError",
    "UnbalancedDesignError", "UndefinedCorrelationError", "UnreachableTargetError",
]
