"""Schroeder backward integration and decay-line fitting for RIR T60 labels."""

import csv
from dataclasses import dataclass

import numpy as np

from .dsp import SampleBuffer
from .exceptions import InsufficientDecayError, InvalidArgumentError
from .room import Rir

T30_RANGE = (-5.0, -35.0)
T20_RANGE = (-5.0, -25.0)
LABEL_METHOD = "schroeder-T30 (-5..-35 dB), T20 fallback, 10 ms block cutoff"


@dataclass(frozen=True)
class EnergyDecayCurve:
    values: np.ndarray
    sample_rate: int

    @property
    def times(self):
        return np.arange(self.values.shape[0]) / self.sample_rate


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    fit_range: tuple
    r_squared: float
    method: str = "T30"
    cutoff: int | None = None

    @property
    def low_confidence(self):
        return self.r_squared < 0.9


def _samples_and_rate(rir):
    if isinstance(rir, Rir):
        return rir.h.samples, rir.sample_rate
    if isinstance(rir, SampleBuffer):
        return rir.samples, rir.sample_rate
    raise InvalidArgumentError("expected a Rir or SampleBuffer")


def schroeder_edc(rir, upper_limit=None):
    """Energy decay curve ``10 log10(sum_{tau >= t} h^2 / sum h^2)`` in dB.

    ``upper_limit`` (exclusive sample index) truncates the integration; the
    curve then has ``upper_limit`` points. Levels after the last nonzero
    sample are ``-inf``.
    """
    h, fs = _samples_and_rate(rir)
    if upper_limit is not None:
        h = h[:upper_limit]
    energy = np.asarray(h, dtype=np.float64) ** 2
    remaining = np.cumsum(energy[::-1])[::-1]
    total = remaining[0] if remaining.size else 0.0
    if total <= 0:
        raise InvalidArgumentError("zero-energy impulse response")
    with np.errstate(divide="ignore"):
        levels = 10.0 * np.log10(remaining / total)
    return EnergyDecayCurve(levels, fs)


def truncation_point(h, sample_rate, block=0.01, within_db=3.0):
    """End of the first 10 ms block after the energy peak whose energy is
    within ``within_db`` of the final complete block."""
    n = int(round(block * sample_rate))
    n_blocks = h.shape[0] // n
    if n_blocks < 2:
        return h.shape[0]
    energies = np.sum(h[:n_blocks * n].reshape(n_blocks, n) ** 2, axis=1)
    threshold = energies[-1] * 10.0 ** (within_db / 10.0)
    peak = int(np.argmax(energies))
    below = np.nonzero(energies[peak:] <= threshold)[0]
    first = peak + int(below[0]) if below.size else n_blocks - 1
    return (first + 1) * n


def _fit_line(times, levels):
    A = np.vstack([times, np.ones_like(times)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, levels, rcond=None)
    pred = slope * times + intercept
    ss_res = float(np.sum((levels - pred) ** 2))
    ss_tot = float(np.sum((levels - levels.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), float(min(max(r2, 0.0), 1.0))


def estimate_t60(rir, fit_range=T30_RANGE, fallback_range=T20_RANGE, cutoff=True):
    """Schroeder T60 from a line fit on the decay curve.

    Returns
    -------
    t60 : float
        ``-60 / slope`` in seconds.
    fit : DecayFit
        Slope (dB/s), intercept, the range actually used, r-squared and
        the truncation index. ``fit.low_confidence`` flags r^2 < 0.9.

    Raises
    ------
    InsufficientDecayError
        If the curve reaches neither range's lower level with at least
        three samples inside it.
    """
    h, fs = _samples_and_rate(rir)
    limit = truncation_point(h, fs) if cutoff else None
    edc = schroeder_edc(rir, upper_limit=limit)
    times = edc.times
    finite = np.isfinite(edc.values)
    for rng, method in ((fit_range, "T30"), (fallback_range, "T20")):
        hi, lo = max(rng), min(rng)
        reached = np.any(finite & (edc.values <= lo))
        sel = finite & (edc.values <= hi) & (edc.values >= lo)
        if reached and np.count_nonzero(sel) >= 3:
            slope, intercept, r2 = _fit_line(times[sel], edc.values[sel])
            if slope >= 0:
                break
            fit = DecayFit(slope, intercept, (hi, lo), r2, method, limit)
            return -60.0 / slope, fit
    raise InsufficientDecayError(
        "energy decay curve does not span the -5..-25 dB fit range")


def label_rir(rir):
    """Fill ``rir.ground_truth_t60`` and record how it was derived."""
    t60, fit = estimate_t60(rir)
    rir.ground_truth_t60 = float(t60)
    rir.provenance["t60_method"] = LABEL_METHOD
    rir.provenance["t60_fit"] = {"range_db": list(fit.fit_range), "method": fit.method,
                                 "r_squared": fit.r_squared,
                                 "low_confidence": fit.low_confidence}
    return rir


def write_edc_csv(path, edc):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "level_db"])
        for t, v in zip(edc.times, edc.values):
            writer.writerow([f"{t:.6f}", f"{v:.4f}"])
