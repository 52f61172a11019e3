"""Signal-processing substrate: windows, STFT/iSTFT, convolution, resampling
and file I/O for mono waveforms and magnitude spectrograms.

All computation here is float64. Frames are not center padded: frame ``l``
covers samples ``[l * hop, l * hop + window_len)``.
"""

import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .exceptions import InvalidArgumentError
from .validation import check_sample_rate, check_waveform

PIPELINE_RATE = 16000


@dataclass(frozen=True)
class SampleBuffer:
    """A mono waveform and its sample rate (Hz)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = check_waveform(self.samples, name="samples", min_length=0)
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", check_sample_rate(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 320
    hop: int = 160
    fft_len: int = 320

    def __post_init__(self):
        if self.window_len < 2:
            raise InvalidArgumentError("window_len must be >= 2")
        if not 0 < self.hop <= self.window_len:
            raise InvalidArgumentError("hop must be in (0, window_len]")
        if self.fft_len < self.window_len:
            raise InvalidArgumentError("fft_len must be >= window_len")

    @property
    def n_bins(self):
        return self.fft_len // 2 + 1

    def n_frames(self, n_samples):
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop + 1


@dataclass(frozen=True)
class ComplexSpectrogram:
    """STFT values of shape (frames, bins) plus the config that made them."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = PIPELINE_RATE
    n_samples: int = 0

    @property
    def shape(self):
        return self.values.shape


def hann_window(length):
    """Periodic (DFT-even) Hann window, ``0.5 - 0.5 cos(2 pi i / length)``."""
    if length < 2:
        raise InvalidArgumentError(f"window length must be >= 2, got {length}")
    i = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * i / length)


def _as_buffer(x, sample_rate=None):
    if isinstance(x, SampleBuffer):
        return x
    return SampleBuffer(np.asarray(x, dtype=np.float64),
                        sample_rate or PIPELINE_RATE)


def stft(x, cfg=None):
    """Short-time Fourier transform without center padding.

    Parameters
    ----------
    x : SampleBuffer or array_like
        Mono input; bare arrays are taken to be at 16 kHz.
    cfg : StftConfig, optional
        Defaults to the 20 ms / 10 ms / 320-point pipeline setup.

    Returns
    -------
    ComplexSpectrogram
        ``floor((len(x) - window_len) / hop) + 1`` frames by
        ``fft_len // 2 + 1`` bins.
    """
    cfg = cfg or StftConfig()
    buf = _as_buffer(x)
    n = len(buf)
    if n < cfg.window_len:
        raise InvalidArgumentError(
            f"input has {n} samples, fewer than window_len={cfg.window_len}")
    frames = np.lib.stride_tricks.sliding_window_view(buf.samples, cfg.window_len)
    frames = frames[::cfg.hop] * hann_window(cfg.window_len)
    values = np.fft.rfft(frames, n=cfg.fft_len, axis=-1)
    return ComplexSpectrogram(values, cfg, buf.sample_rate, n)


def istft(S, length=None):
    """Weighted overlap-add inverse of :func:`stft`.

    Samples not covered by any frame (a tail shorter than one hop) come back
    as zeros.
    """
    cfg = S.config
    values = np.asarray(S.values)
    if values.ndim != 2 or values.shape[1] != cfg.n_bins:
        raise InvalidArgumentError(
            f"spectrogram shape {values.shape} inconsistent with {cfg}")
    n_frames = values.shape[0]
    win = hann_window(cfg.window_len)
    total = (n_frames - 1) * cfg.hop + cfg.window_len if n_frames else 0
    length = max(total, S.n_samples if length is None else length)
    out = np.zeros(length)
    norm = np.zeros(length)
    frames = np.fft.irfft(values, n=cfg.fft_len, axis=-1)[:, :cfg.window_len]
    for l in range(n_frames):
        start = l * cfg.hop
        out[start:start + cfg.window_len] += frames[l] * win
        norm[start:start + cfg.window_len] += win ** 2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    return SampleBuffer(out, S.sample_rate)


def magnitude(S):
    """Entrywise modulus of a complex spectrogram (array or ComplexSpectrogram)."""
    values = S.values if isinstance(S, ComplexSpectrogram) else np.asarray(S)
    return np.abs(values)


def spectral_energy(S):
    """Energy of the windowed frames recovered from a one-sided STFT.

    Bins other than DC and Nyquist count twice; the sum is divided by
    ``fft_len`` so that the result equals ``sum((w * frame) ** 2)``.
    """
    cfg = S.config
    power = np.abs(S.values) ** 2
    weights = np.full(cfg.n_bins, 2.0)
    weights[0] = 1.0
    if cfg.fft_len % 2 == 0:
        weights[-1] = 1.0
    return float(np.sum(power * weights) / cfg.fft_len)


def convolve(x, h, method="auto"):
    """Full linear convolution of two buffers at the same sample rate.

    ``method`` is ``"direct"``, ``"fft"`` or ``"auto"`` (FFT once the
    product of lengths exceeds a small threshold).
    """
    bx, bh = _as_buffer(x), _as_buffer(h)
    if isinstance(x, SampleBuffer) and isinstance(h, SampleBuffer) \
            and bx.sample_rate != bh.sample_rate:
        raise InvalidArgumentError(
            f"sample rate mismatch: {bx.sample_rate} vs {bh.sample_rate}")
    a, b = bx.samples, bh.samples
    if a.size == 0 or b.size == 0:
        raise InvalidArgumentError("cannot convolve an empty buffer")
    if method == "auto":
        method = "direct" if a.size * b.size <= 50_000 else "fft"
    if method == "direct":
        out = np.convolve(a, b)
    elif method == "fft":
        out = signal.fftconvolve(a, b)
    else:
        raise InvalidArgumentError(f"unknown convolution method {method!r}")
    return SampleBuffer(out, bx.sample_rate)


def _resampling_filter(up, down):
    # Kaiser low-pass at the interpolated rate: flat to 0.45 x min(rate),
    # cutoff at 0.475 x min(rate), ~90 dB stop band. Frequencies below are
    # fractions of the interpolated rate's Nyquist.
    m = max(up, down)
    numtaps, beta = signal.kaiserord(90.0, 0.1 / m)
    numtaps |= 1
    taps = signal.firwin(numtaps, 0.95 / m, window=("kaiser", beta))
    return taps * up


def resample(x, target_rate):
    """Polyphase windowed-sinc resampling to ``target_rate`` Hz."""
    buf = _as_buffer(x)
    target_rate = check_sample_rate(target_rate, "target_rate")
    if target_rate == buf.sample_rate:
        return buf
    ratio = Fraction(target_rate, buf.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    taps = _resampling_filter(up, down)
    out = signal.resample_poly(buf.samples, up, down, window=taps)
    return SampleBuffer(out, target_rate)


def read_wav(path):
    """Read a mono 16-bit PCM or 32-bit float WAV file into a SampleBuffer."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise InvalidArgumentError(
            f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InvalidArgumentError(
            f"{path}: unsupported sample format {data.dtype} "
            "(use 16-bit PCM or 32-bit float)")
    return SampleBuffer(samples, rate)


def write_wav(path, buf, fmt="float32"):
    """Write a SampleBuffer as mono ``float32`` or ``pcm16`` WAV."""
    if fmt == "float32":
        data = buf.samples.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise InvalidArgumentError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, buf.sample_rate, data)


def save_spectrogram(path, mag):
    """Dump a (T, K) matrix: little-endian int32 T, K then row-major float32."""
    mag = np.asarray(mag, dtype="<f4")
    if mag.ndim != 2:
        raise InvalidArgumentError("spectrogram dump expects a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", *mag.shape))
        fh.write(np.ascontiguousarray(mag).tobytes())


def load_spectrogram(path):
    with open(path, "rb") as fh:
        t, k = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != t * k:
        raise InvalidArgumentError(f"{path}: payload size does not match header {t}x{k}")
    return data.reshape(t, k).astype(np.float32)
