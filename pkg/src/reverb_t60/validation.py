"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import InvalidArgumentError


def check_waveform(samples, name="samples", min_length=1, dtype=np.float64):
    """Return ``samples`` as a finite 1-D array of ``dtype``.

    Raises
    ------
    InvalidArgumentError
        If the input is not one-dimensional, too short or not finite.
    """
    arr = np.asarray(samples, dtype=dtype)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size < min_length:
        raise InvalidArgumentError(
            f"{name} needs at least {min_length} samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def check_sample_rate(rate, name="sample_rate"):
    if isinstance(rate, bool) or int(rate) != rate or rate <= 0:
        raise InvalidArgumentError(f"{name} must be a positive integer, got {rate!r}")
    return int(rate)


def check_same_shape(*arrays, names=None):
    shapes = [np.shape(a) for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        label = ", ".join(names) if names else "inputs"
        raise InvalidArgumentError(f"shape mismatch between {label}: {shapes}")


def check_finite(arr, name="input"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise InvalidArgumentError(f"{name} must be positive, got {value!r}")
    return float(value)


def check_waveform_batch(X, name="X"):
    """Coerce an estimator input to a list of 1-D float arrays.

    Accepts a 2-D array (n_samples, n_times), a 3-D array
    (n_samples, n_channels, n_times) whose channel 0 is the mixture, or a
    sequence of 1-D arrays of possibly different lengths.
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 1:
            raise InvalidArgumentError(
                f"{name} must hold several waveforms; wrap a single one in a list")
        if X.ndim == 3:
            X = X[:, 0, :]
        if X.ndim != 2:
            raise InvalidArgumentError(f"{name} has unsupported shape {X.shape}")
        return [check_waveform(row, name=name) for row in X]
    out = []
    for item in X:
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[0]
        out.append(check_waveform(arr, name=name))
    if not out:
        raise InvalidArgumentError(f"{name} is empty")
    return out
