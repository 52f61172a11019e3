"""Cuboid-room acoustics: statistical T60 formulas, image-source RIR
simulation and exponential-sine-sweep measurement.

Absorption is uniform over the six walls. Each wall hit scales pressure by
``sqrt(1 - absorption)``; images are placed with 16-tap Hann-windowed sinc
fractional delays.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, signal

from .dsp import SampleBuffer, read_wav, write_wav
from .exceptions import (InvalidArgumentError, MeasurementFailedError,
                         UnreachableTargetError)

SABINE_CONSTANT = 0.161
SPEED_OF_SOUND = 343.0
FRACTIONAL_TAPS = 16
MAX_ABSORPTION = 0.999

TRAINING_DISTANCES = (0.7, 1.0, 1.7, 2.0, 2.5)
TRAINING_ANGLES = tuple(range(-45, 46, 10))

# Rooms with simulated RIRs from the per-room evaluation table: (L, W, H) in
# meters and the T60 in seconds.
REFERENCE_ROOMS = {
    "room1": ((3.85, 5.33, 3.86), 0.416),
    "room2": ((3.81, 4.65, 2.62), 0.751),
    "room3": ((4.48, 6.96, 3.12), 1.301),
}


@dataclass(frozen=True)
class RoomSpec:
    length: float
    width: float
    height: float
    absorption: float = 0.2
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise InvalidArgumentError("room dimensions must be positive")
        if not 0 < self.absorption <= 1:
            raise InvalidArgumentError(
                f"absorption must be in (0, 1], got {self.absorption}")
        if self.speed_of_sound <= 0:
            raise InvalidArgumentError("speed_of_sound must be positive")

    @property
    def dims(self):
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self):
        return self.length * self.width * self.height

    @property
    def surface(self):
        l, w, h = self.length, self.width, self.height
        return 2.0 * (l * w + l * h + w * h)

    def with_absorption(self, absorption):
        return RoomSpec(self.length, self.width, self.height, absorption,
                        self.speed_of_sound)

    def contains(self, point, margin=0.0):
        p = np.asarray(point, dtype=float)
        return bool(np.all(p > margin) and np.all(p < self.dims - margin))


@dataclass(frozen=True)
class SourceReceiverGeometry:
    source: tuple
    receiver: tuple

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(float(v) for v in self.source))
        object.__setattr__(self, "receiver", tuple(float(v) for v in self.receiver))
        if len(self.source) != 3 or len(self.receiver) != 3:
            raise InvalidArgumentError("positions must be 3-vectors")
        if self.distance <= 0:
            raise InvalidArgumentError("source and receiver coincide")

    @property
    def distance(self):
        return float(np.linalg.norm(np.subtract(self.source, self.receiver)))


@dataclass
class Rir:
    """An impulse response with provenance and its ground-truth T60 label."""

    h: SampleBuffer
    provenance: dict = field(default_factory=dict)
    ground_truth_t60: float | None = None

    def __post_init__(self):
        if not np.any(self.h.samples):
            raise InvalidArgumentError("RIR has zero energy")

    @property
    def sample_rate(self):
        return self.h.sample_rate


def sabine_t60(room):
    return SABINE_CONSTANT * room.volume / (room.absorption * room.surface)


def eyring_t60(room):
    if room.absorption >= 1.0:
        return 0.0
    return SABINE_CONSTANT * room.volume / (-room.surface * math.log1p(-room.absorption))


def absorption_for_target(room, target_t60):
    """Uniform absorption giving ``target_t60`` seconds under Eyring's formula.

    ``room`` supplies the geometry; its own absorption is ignored.

    Raises
    ------
    UnreachableTargetError
        If the required absorption is 0.999 or more.
    """
    if not np.isfinite(target_t60) or target_t60 <= 0:
        raise InvalidArgumentError(f"target T60 must be positive, got {target_t60}")
    alpha = -math.expm1(-SABINE_CONSTANT * room.volume / (room.surface * target_t60))
    if alpha >= MAX_ABSORPTION:
        raise UnreachableTargetError(
            f"T60={target_t60} s needs absorption {alpha:.4f} >= {MAX_ABSORPTION}")
    return float(min(max(alpha, np.finfo(float).tiny), 1.0 - 1e-12))


def _sphere_directions(n=4096):
    # Fibonacci lattice: deterministic, near-uniform unit vectors
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5.0 ** 0.5) * i
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


_DIRECTIONS = _sphere_directions()


def ism_t30(room, n_points=600):
    """T30 (s) that the specular image-source model produces for ``room``.

    Late image energy arriving from direction ``u`` after ``t`` seconds has
    met ``c t sum(|u_i| / L_i)`` walls, so the decay is the directional
    average of ``(1 - absorption) ** hits``. Elongated rooms decay slower
    than Eyring predicts because near-axial paths hit fewer walls.
    """
    if room.absorption >= 1.0:
        return 0.0
    rate = np.abs(_DIRECTIONS) @ (1.0 / room.dims) * room.speed_of_sound
    log_r = math.log1p(-room.absorption)
    horizon = 4.0 * max(eyring_t60(room), 1e-3)
    t = np.linspace(0.0, horizon, n_points)
    energy = np.exp(np.outer(t, rate) * log_r).mean(axis=1)
    remaining = np.cumsum(energy[::-1])[::-1]
    edc = 10.0 * np.log10(remaining / remaining[0])
    sel = (edc <= -5.0) & (edc >= -35.0)
    slope = np.polyfit(t[sel], edc[sel], 1)[0]
    return -60.0 / slope


def absorption_for_target_ism(room, target_t60):
    """Uniform absorption whose image-source decay has the target T30.

    Starts from the Eyring solution and refines it against :func:`ism_t30`.
    """
    alpha0 = absorption_for_target(room, target_t60)

    def excess(alpha):
        return math.log(ism_t30(room.with_absorption(alpha)) / target_t60)

    hi = MAX_ABSORPTION - 1e-6
    if excess(hi) > 0:
        raise UnreachableTargetError(
            f"T60={target_t60} s is below what absorption < {MAX_ABSORPTION} gives")
    return float(optimize.brentq(excess, alpha0, hi, xtol=1e-10))


def geometry_from_polar(room, distance, angle_deg, rng, height=None, margin=0.3,
                        max_tries=1000):
    """Place a receiver at random and the source at (distance, azimuth) from it.

    The azimuth is measured in the horizontal plane from the room's x axis.
    Both points keep ``margin`` meters clearance from every wall.
    """
    theta = math.radians(angle_deg)
    offset = np.array([math.cos(theta), math.sin(theta), 0.0]) * distance
    dims = room.dims
    for _ in range(max_tries):
        rec = rng.uniform(margin, dims - margin)
        if height is not None:
            rec[2] = height
        src = rec + offset
        if room.contains(src, margin) and room.contains(rec, margin):
            return SourceReceiverGeometry(tuple(src), tuple(rec))
    raise InvalidArgumentError(
        f"cannot fit distance {distance} m at {angle_deg} deg inside {dims}")


def _axis_images(src, rec, length, n_max):
    n = np.arange(-n_max, n_max + 1)
    pos = np.concatenate([src + 2 * n * length, -src + 2 * n * length])
    hits = np.concatenate([2 * np.abs(n), np.abs(2 * n - 1)])
    return pos - rec, hits


def _fractional_kernel(frac_delay):
    """Hann-windowed sinc taps for delays ``frac_delay`` (samples, >= 0).

    Returns the first tap index and a (n_images, 16) array of weights.
    """
    half = FRACTIONAL_TAPS // 2
    base = np.floor(frac_delay).astype(np.int64) - (half - 1)
    offsets = np.arange(FRACTIONAL_TAPS)
    u = (base[:, None] + offsets[None, :]) - frac_delay[:, None]
    weights = np.sinc(u) * (0.5 + 0.5 * np.cos(np.pi * u / half))
    return base, weights


def dc_blocking_highpass(h, sample_rate, cutoff=100.0):
    """Second-order Allen-Berkley high-pass removing the image-sum DC build-up.

    Same-sign image pulses pile up into a slowly varying mean pressure whose
    energy decays slower than the reflections themselves.
    """
    w = 2.0 * math.pi * cutoff / sample_rate
    r1 = math.exp(-w)
    b1 = 2.0 * r1 * math.cos(w)
    b2 = -r1 * r1
    a1 = -(1.0 + r1)
    return signal.lfilter([1.0, a1, r1], [1.0, -b1, -b2], h)


def simulate_rir(room, geo, sample_rate=16000, max_length=None, max_order=None,
                 seed=None, highpass=100.0):
    """Image-source room impulse response of a cuboid room.

    Parameters
    ----------
    room : RoomSpec
    geo : SourceReceiverGeometry
    sample_rate : int
        Must be at least 8000 Hz.
    max_length : float, optional
        Length in seconds; defaults to 1.25 times the Eyring T60.
    max_order : int, optional
        Drop images with more than this many wall hits.
    seed : int, optional
        Recorded in the provenance only; the simulation is deterministic.
    highpass : float or None
        Cutoff (Hz) of the DC-blocking filter; ``None`` disables it.

    Returns
    -------
    Rir
        Unlabelled response; run :func:`reverb_t60.decay.label_rir` to fill
        ``ground_truth_t60``.
    """
    if sample_rate < 8000:
        raise InvalidArgumentError("sample_rate must be >= 8000 Hz")
    src, rec = np.asarray(geo.source), np.asarray(geo.receiver)
    if not (room.contains(src) and room.contains(rec)):
        raise InvalidArgumentError("source and receiver must lie strictly inside the room")
    c = room.speed_of_sound
    if max_length is None:
        max_length = 1.25 * eyring_t60(room)
    direct = geo.distance / c
    n_samples = max(int(math.ceil(max_length * sample_rate)),
                    int(math.ceil(direct * sample_rate)) + 2 * FRACTIONAL_TAPS)
    max_dist = n_samples / sample_rate * c
    beta = math.sqrt(1.0 - room.absorption)

    axes = []
    for k in range(3):
        n_max = int(math.ceil(max_dist / (2 * room.dims[k]))) + 1
        d, hits = _axis_images(src[k], rec[k], room.dims[k], n_max)
        keep = np.abs(d) <= max_dist
        axes.append((d[keep], hits[keep]))
    (dx, hx), (dy, hy), (dz, hz) = axes

    out = np.zeros(n_samples + FRACTIONAL_TAPS)
    yz_d2 = dy[:, None] ** 2 + dz[None, :] ** 2
    yz_hits = (hy[:, None] + hz[None, :]).ravel()
    yz_d2 = yz_d2.ravel()
    for xi in range(dx.shape[0]):
        d2 = dx[xi] ** 2 + yz_d2
        hits = hx[xi] + yz_hits
        mask = d2 <= max_dist ** 2
        if max_order is not None:
            mask &= hits <= max_order
        if not np.any(mask):
            continue
        dist = np.sqrt(d2[mask])
        amp = beta ** hits[mask] / (4.0 * math.pi * dist)
        delay = dist / c * sample_rate
        start, weights = _fractional_kernel(delay)
        idx = start[:, None] + np.arange(FRACTIONAL_TAPS)[None, :]
        vals = weights * amp[:, None]
        valid = (idx >= 0) & (idx < out.shape[0])
        out += np.bincount(idx[valid], weights=vals[valid], minlength=out.shape[0])
    out = out[:n_samples]
    if highpass:
        out = dc_blocking_highpass(out, sample_rate, highpass)
    h = SampleBuffer(out, sample_rate)
    provenance = {
        "kind": "simulated",
        "room": [room.length, room.width, room.height],
        "absorption": room.absorption,
        "speed_of_sound": c,
        "source": list(geo.source),
        "receiver": list(geo.receiver),
        "seed": seed,
        "eyring_t60": eyring_t60(room),
        "length_s": n_samples / sample_rate,
        "highpass_hz": highpass,
    }
    return Rir(h, provenance)


@dataclass(frozen=True)
class EssConfig:
    f_start: float = 20.0
    f_end: float = 20000.0
    duration: float = 20.0
    sample_rate: int = 48000
    fade_in: float = 0.01
    fade_out: float = 0.2

    def __post_init__(self):
        if not 0 < self.f_start < self.f_end <= self.sample_rate / 2:
            raise InvalidArgumentError(
                "need 0 < f_start < f_end <= sample_rate / 2")
        if self.duration <= 0:
            raise InvalidArgumentError("duration must be positive")
        if self.fade_in + self.fade_out > self.duration:
            raise InvalidArgumentError("fades longer than the sweep")

    @property
    def rate_constant(self):
        """Time (s) per e-fold of frequency."""
        return self.duration / math.log(self.f_end / self.f_start)


def ess_phase(t, cfg):
    """Sweep phase ``2 pi f_start L (exp(t / L) - 1)`` in radians."""
    L = cfg.rate_constant
    return 2.0 * math.pi * cfg.f_start * L * np.expm1(np.asarray(t) / L)


def _fade(n, n_in, n_out):
    w = np.ones(n)
    if n_in:
        w[:n_in] = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_in) / n_in)
    if n_out:
        w[n - n_out:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(1, n_out + 1) / n_out)
    return w


def generate_ess(cfg=None):
    """Exponential sine sweep and its amplitude-compensated inverse filter.

    The inverse filter is the time-reversed sweep weighted by
    ``exp(t / L)`` (+6 dB per octave), scaled so that the excitation
    convolved with it peaks at exactly 1.

    Returns
    -------
    excitation, inverse_filter : SampleBuffer
    """
    cfg = cfg or EssConfig()
    n = int(round(cfg.duration * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    fade = _fade(n, int(round(cfg.fade_in * cfg.sample_rate)),
                 int(round(cfg.fade_out * cfg.sample_rate)))
    x = SampleBuffer(np.sin(ess_phase(t, cfg)) * fade, cfg.sample_rate)
    return x, ess_inverse_filter(x, cfg.f_start, cfg.f_end)


def ess_inverse_filter(excitation, f_start=20.0, f_end=20000.0):
    """Inverse filter for a recorded-to-disk sweep with known band edges."""
    x = excitation.samples
    fs = excitation.sample_rate
    t = np.arange(x.shape[0]) / fs
    rate_constant = (x.shape[0] / fs) / math.log(f_end / f_start)
    inv = x[::-1] * np.exp(t[::-1] / rate_constant)
    peak = np.max(np.abs(signal.fftconvolve(x, inv)))
    if peak == 0:
        raise InvalidArgumentError("sweep is silent")
    return SampleBuffer(inv / peak, fs)


def deconvolve_rir(recording, inverse_filter, pre_delay=0.001, length=None,
                   min_peak_db=20.0):
    """Recover an impulse response from a sweep recording.

    The output of ``recording * inverse_filter`` is aligned so that its
    largest peak (the direct path) sits ``pre_delay`` seconds after sample 0.
    Harmonic distortion products arrive before the linear peak and fall
    outside the returned window.

    Parameters
    ----------
    recording, inverse_filter : SampleBuffer
    pre_delay : float
        Seconds kept before the direct-path peak.
    length : float, optional
        Seconds kept after alignment; defaults to everything the recording
        supports past the excitation length.

    Raises
    ------
    MeasurementFailedError
        If the peak is less than ``min_peak_db`` above the median level.
    """
    if recording.sample_rate != inverse_filter.sample_rate:
        raise InvalidArgumentError("recording and inverse filter rates differ")
    fs = recording.sample_rate
    full = signal.fftconvolve(recording.samples, inverse_filter.samples)
    mag = np.abs(full)
    peak = int(np.argmax(mag))
    median = float(np.median(mag))
    if mag[peak] == 0 or (median > 0 and 20 * np.log10(mag[peak] / median) < min_peak_db):
        raise MeasurementFailedError("no direct-path peak above the noise floor")
    offset = int(round(pre_delay * fs))
    start = max(peak - offset, 0)
    if length is None:
        # with the sweep starting at sample 0, the linear response ends at
        # index len(recording) - 1
        stop = min(full.shape[0], max(len(recording), peak + 1))
    else:
        stop = min(full.shape[0], start + int(round(length * fs)))
    h = SampleBuffer(full[start:stop], fs)
    provenance = {"kind": "measured", "method": "ess", "pre_delay_s": pre_delay,
                  "peak_index": peak - start}
    return Rir(h, provenance)


def save_rir(path, rir):
    """Write ``path`` (float32 WAV) and a sidecar ``path.with_suffix('.json')``."""
    path = Path(path)
    write_wav(path, rir.h, fmt="float32")
    record = dict(rir.provenance)
    record["ground_truth_t60"] = rir.ground_truth_t60
    record["sample_rate"] = rir.sample_rate
    path.with_suffix(".json").write_text(json.dumps(record, indent=2, sort_keys=True))


def load_rir(path):
    path = Path(path)
    h = read_wav(path)
    sidecar = path.with_suffix(".json")
    record = json.loads(sidecar.read_text()) if sidecar.exists() else {"kind": "measured",
                                                                      "label": path.stem}
    t60 = record.pop("ground_truth_t60", None)
    record.pop("sample_rate", None)
    return Rir(h, record, t60)


def room_from_provenance(provenance):
    l, w, h = provenance["room"]
    return RoomSpec(l, w, h, provenance["absorption"],
                    provenance.get("speed_of_sound", SPEED_OF_SOUND))


def room_record(room):
    return asdict(room)
