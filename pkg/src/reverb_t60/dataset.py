"""Noisy reverberant training corpora built from surrogate or user audio.

Each sample is ``y = x + n`` where ``x`` is speech convolved with a room
impulse response and ``n`` is noise convolved with a second response from
the same room, scaled to a drawn SNR. Every random draw comes from one
seeded generator and is written to a JSON manifest, so a corpus can be
rebuilt bit for bit.
"""

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import (PIPELINE_RATE, SampleBuffer, StftConfig, convolve, magnitude, read_wav,
                  resample, stft, write_wav)
from .exceptions import ConfigurationError, InvalidArgumentError
from .decay import label_rir
from .room import (TRAINING_ANGLES, TRAINING_DISTANCES, Rir, RoomSpec, absorption_for_target,
                   absorption_for_target_ism, eyring_t60, geometry_from_polar, load_rir,
                   room_from_provenance, simulate_rir)

MANIFEST_VERSION = 1
TRAIN_SNRS = (0.0, 10.0, 20.0)
TEST_SNRS = (0.0, 5.0, 10.0, 15.0, 20.0)
NOISE_KINDS = ("white", "pink", "brown", "babble", "hum", "ambient")

# (F1, F2, F3) in Hz for a handful of vowels
_VOWELS = np.array([
    (730, 1090, 2440), (270, 2290, 3010), (300, 870, 2240),
    (530, 1840, 2480), (570, 840, 2410), (660, 1720, 2410), (440, 1020, 2240),
], dtype=float)
_BANDWIDTHS = np.array([80.0, 110.0, 160.0])


# --- surrogate sources ------------------------------------------------------
def _resonator_cascade(x, formants, fs, block=160):
    """Filter ``x`` through time-varying two-pole resonators.

    ``formants`` is ``(n_blocks, n_formants)``; coefficients change once per
    block and the filter state carries over between blocks.
    """
    out = np.array(x, dtype=float)
    n_blocks, n_form = formants.shape
    for k in range(n_form):
        r = np.exp(-np.pi * _BANDWIDTHS[k] / fs)
        zi = np.zeros(2)
        y = np.empty_like(out)
        for b in range(n_blocks):
            seg = slice(b * block, min((b + 1) * block, out.shape[0]))
            if seg.start >= out.shape[0]:
                break
            theta = 2.0 * np.pi * formants[b, k] / fs
            a = [1.0, -2.0 * r * np.cos(theta), r * r]
            gain = (1.0 - r) * np.sqrt(1.0 - 2.0 * r * np.cos(2 * theta) + r * r)
            y[seg], zi = signal.lfilter([gain], a, out[seg], zi=zi)
        out = y
    return out


def _envelope(n, fs, ramp=0.015):
    env = np.ones(n)
    m = min(int(ramp * fs), n // 2)
    if m > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
        env[:m] = r
        env[n - m:] = r[::-1]
    return env


def _voiced(rng, n, fs, f0_base):
    f0 = np.clip(f0_base * (1.0 + np.linspace(rng.uniform(-0.15, 0.15),
                                              rng.uniform(-0.15, 0.15), n)), 80.0, 250.0)
    phase = np.cumsum(f0 / fs)
    pulses = np.zeros(n)
    pulses[np.nonzero(np.diff(np.floor(phase), prepend=0.0))[0]] = 1.0
    # double pole: glottal roll-off; first difference: lip radiation
    src = signal.lfilter([1.0, -1.0], [1.0, -1.9, 0.9025], pulses)
    block = 160
    n_blocks = -(-n // block)
    v0, v1 = _VOWELS[rng.integers(len(_VOWELS), size=2)]
    w = np.linspace(0.0, 1.0, n_blocks)[:, None]
    formants = (1 - w) * v0 + w * v1
    return _resonator_cascade(src, formants, fs, block)


def _unvoiced(rng, n, fs):
    sos = signal.butter(2, [2000.0, min(6000.0, 0.45 * fs)], btype="bandpass", fs=fs,
                        output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def _burst(rng, fs):
    m = int(rng.uniform(0.04, 0.09) * fs)
    u = _unvoiced(rng, m, fs)
    return 0.2 * u / (_rms(u) + 1e-12) * _envelope(m, fs, 0.01)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def synth_speech(duration=4.0, seed=0, sample_rate=PIPELINE_RATE, level_rms=0.05):
    """Speech-like surrogate signal.

    Words of two to four syllables alternate with pauses. A syllable is a
    glottal pulse train (pitch 80-250 Hz, gliding) through three formant
    resonators that move between two vowels, optionally flanked by a short
    fricative noise burst. Roughly a fifth of the time is silence.

    Parameters
    ----------
    duration : float
        Length in seconds.
    seed : int
        Fully determines the output.
    sample_rate : int
    level_rms : float
        RMS level of the returned signal.

    Returns
    -------
    SampleBuffer
    """
    if not duration > 0:
        raise InvalidArgumentError(f"duration must be > 0, got {duration}")
    rng = np.random.default_rng(seed)
    fs = int(sample_rate)
    total = int(round(duration * fs))
    out = np.zeros(total)
    f0_base = rng.uniform(95.0, 200.0)
    pos = int(rng.uniform(0.0, 0.15) * fs)
    while pos < total:
        for _ in range(rng.integers(2, 5)):
            parts = []
            if rng.random() < 0.35:
                parts.append(_burst(rng, fs))
            m = int(rng.uniform(0.10, 0.25) * fs)
            v = _voiced(rng, m, fs, f0_base)
            parts.append(rng.uniform(0.6, 1.0) * v / (_rms(v) + 1e-12) * _envelope(m, fs))
            if rng.random() < 0.25:
                parts.append(_burst(rng, fs))
            seg = np.concatenate(parts)
            end = min(pos + seg.shape[0], total)
            out[pos:end] = seg[:end - pos]
            pos = end
            if pos >= total:
                break
        pos += int(rng.uniform(0.08, 0.32) * fs)
    out += 1e-4 * rng.standard_normal(total)  # faint floor, never exactly silent
    out *= level_rms / _rms(out)
    return SampleBuffer(out, fs)


def _colored(rng, n, exponent):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.shape[0], dtype=float)
    f[0] = 1.0
    spec *= f ** (-exponent / 2.0)
    spec[0] = 0.0
    return np.fft.irfft(spec, n=n)


def synth_noise(duration=4.0, seed=0, kind=None, sample_rate=PIPELINE_RATE, level_rms=0.05):
    """Stationary or slowly varying environmental noise surrogate.

    ``kind`` is one of ``white``, ``pink``, ``brown``, ``babble``, ``hum``
    or ``ambient``; when omitted it is drawn from ``seed``.
    """
    if not duration > 0:
        raise InvalidArgumentError(f"duration must be > 0, got {duration}")
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
    if kind not in NOISE_KINDS:
        raise InvalidArgumentError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
    fs = int(sample_rate)
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        x = _colored(rng, n, 1.0)
    elif kind == "brown":
        x = _colored(rng, n, 2.0)
    elif kind == "babble":
        talkers = int(rng.integers(4, 8))
        x = sum(synth_speech(duration, int(rng.integers(2**63)), fs).samples
                for _ in range(talkers))
    elif kind == "hum":
        mains = rng.choice([50.0, 60.0])
        x = sum(rng.uniform(0.2, 1.0) / k * np.sin(2 * np.pi * mains * k * t + rng.uniform(0, 6.3))
                for k in range(1, 9))
        bed = _colored(rng, n, 1.0)
        x = x + 0.3 * _rms(x) * bed / (_rms(bed) + 1e-12)
    else:  # ambient: pink noise with slow random amplitude modulation
        x = _colored(rng, n, 1.0)
        mod = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t + rng.uniform(0, 6.3))
        x = x * mod
    x = np.asarray(x, dtype=float)
    x -= x.mean()
    x *= level_rms / (_rms(x) + 1e-300)
    return SampleBuffer(x, fs)


# --- mixing and targets -----------------------------------------------------
def mix_at_snr(x, n, snr_db):
    """Scale ``n`` so that ``10 log10(P_x / P_scaled_n) = snr_db`` and add.

    Powers are mean squares over the whole signal.

    Returns
    -------
    y : SampleBuffer
        The mixture ``x + g * n``.
    scaled_n : SampleBuffer
        ``g * n``.
    gain : float
        The applied noise gain ``g``.
    """
    if not np.isfinite(snr_db):
        raise InvalidArgumentError(f"snr_db must be finite, got {snr_db}")
    if len(x) != len(n):
        raise InvalidArgumentError(f"length mismatch: {len(x)} vs {len(n)}")
    if x.sample_rate != n.sample_rate:
        raise InvalidArgumentError("sample rate mismatch between speech and noise")
    px = float(np.mean(np.square(x.samples)))
    pn = float(np.mean(np.square(n.samples)))
    if px <= 0 or pn <= 0:
        raise InvalidArgumentError("speech and noise must both have nonzero power")
    gain = float(np.sqrt(px / (pn * 10.0 ** (snr_db / 10.0))))
    scaled = n.samples * gain
    return SampleBuffer(x.samples + scaled, x.sample_rate), SampleBuffer(scaled, n.sample_rate), gain


@dataclass(frozen=True)
class IrmTargets:
    m_speech: np.ndarray
    m_noise: np.ndarray


def compute_irm(magX, magN, kind="magnitude"):
    """Ideal ratio masks for speech and noise.

    ``kind="magnitude"`` gives ``|X| / (|X| + |N|)`` and ``|N| / (|X| + |N|)``,
    which sum to one. ``kind="energy"`` gives ``sqrt(|X|^2 / (|X|^2 + |N|^2))``
    and the matching noise mask, whose squares sum to one. Bins where both
    magnitudes are zero get 0.5 in each ratio.
    """
    magX = np.asarray(magX, dtype=float)
    magN = np.asarray(magN, dtype=float)
    if magX.shape != magN.shape:
        raise InvalidArgumentError(f"shape mismatch: {magX.shape} vs {magN.shape}")
    if kind == "magnitude":
        num_x, num_n = magX, magN
    elif kind == "energy":
        num_x, num_n = magX ** 2, magN ** 2
    else:
        raise InvalidArgumentError(f"unknown IRM kind {kind!r}")
    den = num_x + num_n
    silent = den == 0
    den = np.where(silent, 1.0, den)
    m_x = np.where(silent, 0.5, num_x / den)
    m_n = np.where(silent, 0.5, num_n / den)
    if kind == "energy":
        m_x, m_n = np.sqrt(m_x), np.sqrt(m_n)
    return IrmTargets(m_x, m_n)


def fix_length(samples, n):
    """Zero-pad at the tail or keep the first ``n`` samples."""
    samples = np.asarray(samples)
    if samples.shape[0] >= n:
        return samples[:n]
    return np.pad(samples, (0, n - samples.shape[0]))


# --- corpus description -----------------------------------------------------
@dataclass(frozen=True)
class MixtureSpec:
    """One sample's draws. ``seed`` seeds everything not named by a ref."""

    speech_ref: str
    noise_ref: str
    speech_rir_ref: str
    noise_rir_ref: str
    snr_db: float
    seed: int
    duration: float = 4.0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise InvalidArgumentError("snr_db must be finite")
        if not self.duration > 0:
            raise InvalidArgumentError("duration must be > 0")


@dataclass
class Sample:
    y: SampleBuffer
    x: SampleBuffer
    n: SampleBuffer
    t60_label: float
    spec: MixtureSpec | None = None

    def __post_init__(self):
        if not (len(self.y) == len(self.x) == len(self.n)):
            raise InvalidArgumentError("y, x and n must have equal lengths")
        if not (self.y.sample_rate == self.x.sample_rate == self.n.sample_rate):
            raise InvalidArgumentError("y, x and n must share a sample rate")


@dataclass(frozen=True)
class DatasetConfig:
    """Corpus-building options.

    ``mode="grid"`` makes one sample for every (speech RIR, SNR, speech
    index) combination; ``mode="random"`` draws ``n_samples`` combinations
    with replacement unless ``replacement`` is false.
    """

    split: str = "train"
    mode: str = "grid"
    snrs: tuple = TRAIN_SNRS
    speech_per_condition: int = 1
    n_samples: int = 0
    duration: float = 4.0
    sample_rate: int = PIPELINE_RATE
    seed: int = 0
    noise_rir_policy: str = "different"
    noise_kind: str | None = None
    level_rms: float = 0.05
    irm: str = "magnitude"
    replacement: bool = True
    speech_dir: str | None = None
    noise_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "snrs", tuple(float(s) for s in self.snrs))
        if self.mode not in ("grid", "random"):
            raise ConfigurationError("dataset.mode must be 'grid' or 'random'")
        if not self.snrs or not all(np.isfinite(self.snrs)):
            raise ConfigurationError("dataset.snrs must be a nonempty list of finite values")
        if self.noise_rir_policy not in ("different", "same"):
            raise ConfigurationError("dataset.noise_rir_policy must be 'different' or 'same'")
        if self.irm not in ("magnitude", "energy"):
            raise ConfigurationError("dataset.irm must be 'magnitude' or 'energy'")
        if self.noise_kind is not None and self.noise_kind not in NOISE_KINDS:
            raise ConfigurationError(f"dataset.noise_kind must be one of {NOISE_KINDS}")
        if not self.duration > 0 or self.speech_per_condition < 1:
            raise ConfigurationError("dataset.duration and speech_per_condition must be positive")
        if self.mode == "random" and self.n_samples < 1:
            raise ConfigurationError("dataset.n_samples must be >= 1 in random mode")

    def to_dict(self):
        d = asdict(self)
        d["snrs"] = list(self.snrs)
        return d


@dataclass
class DatasetManifest:
    config: DatasetConfig
    specs: list = field(default_factory=list)
    content_hash: str | None = None

    def to_dict(self):
        return {
            "format_version": MANIFEST_VERSION,
            "split": self.config.split,
            "config": self.config.to_dict(),
            "stft": asdict(StftConfig()),
            "snr_measurement": "reverberant speech vs reverberant noise, full utterance",
            "specs": [asdict(s) for s in self.specs],
            "manifest_hash": self.manifest_hash(),
            "content_hash": self.content_hash,
        }

    def manifest_hash(self):
        blob = json.dumps({"config": self.config.to_dict(),
                           "specs": [asdict(s) for s in self.specs]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        record = json.loads(Path(path).read_text())
        cfg = DatasetConfig(**record["config"])
        specs = [MixtureSpec(**s) for s in record["specs"]]
        return cls(cfg, specs, record.get("content_hash"))

    def __len__(self):
        return len(self.specs)


# --- RIR generation -----------------------------------------------------------
# Seven training room sizes after the ACE corpus rooms (approximate
# dimensions, metres); any list can be configured instead.
TRAINING_ROOMS = (
    (3.32, 4.83, 2.95), (3.22, 5.10, 2.94), (6.61, 5.11, 2.95), (10.30, 9.15, 2.60),
    (9.79, 8.02, 3.03), (13.40, 9.29, 2.94), (4.47, 5.13, 3.18),
)


@dataclass(frozen=True)
class RirGenConfig:
    """RIR pool options: every room is simulated once per target T60.

    With an empty ``targets`` list, ``n_targets`` values are drawn
    uniformly from ``t60_range`` for each room. ``absorption_model`` picks
    how absorption is solved from a target: ``"ism"`` matches the
    simulator's own decay, ``"eyring"`` inverts the Eyring formula.
    """

    rooms: tuple = TRAINING_ROOMS
    targets: tuple = (0.3, 0.6, 0.9)
    n_targets: int = 3
    t60_range: tuple = (0.2, 1.5)
    absorption_model: str = "ism"
    sample_rate: int = PIPELINE_RATE
    seed: int = 0
    distances: tuple = TRAINING_DISTANCES
    angles: tuple = TRAINING_ANGLES

    def __post_init__(self):
        object.__setattr__(self, "rooms", tuple(tuple(float(v) for v in r) for r in self.rooms))
        object.__setattr__(self, "targets", tuple(float(t) for t in self.targets))
        for key in ("t60_range", "distances", "angles"):
            object.__setattr__(self, key, tuple(float(v) for v in getattr(self, key)))
        if not self.rooms or any(len(r) != 3 or min(r) <= 0 for r in self.rooms):
            raise ConfigurationError("rirs.rooms must be a list of positive [L, W, H] triples")
        if self.absorption_model not in ("ism", "eyring"):
            raise ConfigurationError("rirs.absorption_model must be 'ism' or 'eyring'")
        if any(t <= 0 for t in self.targets) or (not self.targets and self.n_targets < 1):
            raise ConfigurationError("rirs.targets must be positive (or n_targets >= 1)")

    def to_dict(self):
        d = asdict(self)
        return json.loads(json.dumps(d))


def plan_rirs(cfg):
    """Per-RIR jobs ``(id, dims, target, distance, angle, seed)`` drawn
    from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    jobs = []
    for dims in cfg.rooms:
        targets = cfg.targets or tuple(rng.uniform(*cfg.t60_range, size=cfg.n_targets))
        for target in targets:
            jobs.append((f"rir_{len(jobs):05d}", dims, float(target),
                         float(rng.choice(cfg.distances)), float(rng.choice(cfg.angles)),
                         int(rng.integers(2**31))))
    return jobs


def simulate_planned(job, cfg):
    """Run one planned RIR; returns the labelled Rir or raises
    UnreachableTargetError."""
    key, dims, target, distance, angle, seed = job
    base = RoomSpec(*dims, 0.5)
    solver = absorption_for_target_ism if cfg.absorption_model == "ism" else absorption_for_target
    room = base.with_absorption(solver(base, target))
    rng = np.random.default_rng(seed)
    geo = geometry_from_polar(room, distance, angle, rng)
    # Eyring underpredicts the simulated decay in flat rooms; size by both
    length = 1.25 * max(target, eyring_t60(room))
    rir = simulate_rir(room, geo, cfg.sample_rate, max_length=length, seed=seed)
    rir.provenance.update(id=key, target_t60=target, absorption_model=cfg.absorption_model)
    return label_rir(rir)


# --- RIR pool -----------------------------------------------------------------
def rir_id(rir, index):
    return str(rir.provenance.get("id", f"rir_{index:05d}"))


def _room_key(rir):
    p = rir.provenance
    if p.get("kind") == "simulated" and "room" in p:
        return ("simulated", tuple(round(float(v), 6) for v in p["room"]),
                round(float(p["absorption"]), 9))
    return ("measured", str(p.get("room_label", p.get("id", id(rir)))))


class RirPool:
    """Labelled RIRs indexed by id and grouped by room."""

    def __init__(self, rirs):
        if not rirs:
            raise ConfigurationError("the RIR pool is empty")
        self.rirs = {}
        self.rooms = {}
        for i, r in enumerate(rirs):
            if r.ground_truth_t60 is None:
                label_rir(r)
            key = rir_id(r, i)
            if key in self.rirs:
                raise ConfigurationError(f"duplicate RIR id {key}")
            self.rirs[key] = r
            self.rooms.setdefault(_room_key(r), []).append(key)
        self.ids = list(self.rirs)

    def __len__(self):
        return len(self.ids)

    def siblings(self, key):
        room = self.rooms[_room_key(self.rirs[key])]
        return [k for k in room if k != key]

    @classmethod
    def from_directory(cls, directory):
        paths = sorted(Path(directory).glob("*.wav"))
        if not paths:
            raise ConfigurationError(f"no RIR WAV files in {directory}")
        rirs = []
        for p in paths:
            r = load_rir(p)
            r.provenance.setdefault("id", p.stem)
            rirs.append(r)
        return cls(rirs)


def _noise_rir_ref(pool, speech_key, policy, rng, seed):
    if policy == "same":
        return speech_key
    sib = pool.siblings(speech_key)
    if sib:
        return sib[int(rng.integers(len(sib)))]
    if pool.rirs[speech_key].provenance.get("kind") == "simulated":
        # no stored sibling: one simulated companion position per RIR
        digest = hashlib.sha256(f"{seed}:{speech_key}".encode()).hexdigest()
        return f"companion:{speech_key}:{int(digest[:8], 16)}"
    return speech_key


def _source_files(directory):
    if directory is None:
        return None
    files = sorted(Path(directory).rglob("*.wav"))
    if not files:
        raise ConfigurationError(f"no WAV files found in {directory}")
    return [str(f) for f in files]


def build_manifest(cfg, pool):
    """Draw every sample's sources, RIRs and SNR from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    speech_files = _source_files(cfg.speech_dir)
    noise_files = _source_files(cfg.noise_dir)

    def speech_ref():
        if speech_files:
            return f"wav:{speech_files[int(rng.integers(len(speech_files)))]}"
        return f"synth:{int(rng.integers(2**63))}"

    def noise_ref():
        if noise_files:
            return f"wav:{noise_files[int(rng.integers(len(noise_files)))]}"
        kind = cfg.noise_kind or NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
        return f"synth:{kind}:{int(rng.integers(2**63))}"

    if cfg.mode == "grid":
        combos = [(k, snr) for k in pool.ids for snr in cfg.snrs
                  for _ in range(cfg.speech_per_condition)]
    else:
        grid = [(k, snr) for k in pool.ids for snr in cfg.snrs]
        if not cfg.replacement and cfg.n_samples > len(grid):
            raise ConfigurationError(
                f"requested {cfg.n_samples} samples without replacement but only "
                f"{len(grid)} (RIR, SNR) combinations exist")
        idx = rng.choice(len(grid), size=cfg.n_samples, replace=cfg.replacement)
        combos = [grid[i] for i in idx]
    specs = []
    for key, snr in combos:
        specs.append(MixtureSpec(
            speech_ref=speech_ref(), noise_ref=noise_ref(), speech_rir_ref=key,
            noise_rir_ref=_noise_rir_ref(pool, key, cfg.noise_rir_policy, rng, cfg.seed),
            snr_db=float(snr), seed=int(rng.integers(2**63)), duration=cfg.duration))
    return DatasetManifest(cfg, specs)


# --- materialization ----------------------------------------------------------
def _load_source(ref, n, fs, rng, synth, level_rms):
    if ref.startswith("synth:"):
        parts = ref.split(":")
        duration = n / fs
        if synth == "speech":
            return synth_speech(duration, int(parts[1]), fs, level_rms).samples
        return synth_noise(duration, int(parts[2]), parts[1], fs, level_rms).samples
    if ref.startswith("wav:"):
        buf = resample(read_wav(ref[4:]), fs)
        samples = buf.samples
        if synth == "noise" and samples.shape[0] > n:
            start = int(rng.integers(samples.shape[0] - n + 1))
            samples = samples[start:start + n]
        return fix_length(samples, n)
    raise ConfigurationError(f"unrecognized source reference {ref!r}")


_COMPANIONS = {}


def _resolve_rir(pool, ref, fs):
    if ref.startswith("companion:"):
        _, base, seed = ref.split(":")
        if ref not in _COMPANIONS:
            origin = pool.rirs[base]
            room = room_from_provenance(origin.provenance)
            rng = np.random.default_rng(int(seed))
            geo = geometry_from_polar(room, float(rng.choice(TRAINING_DISTANCES)),
                                      float(rng.choice(TRAINING_ANGLES)), rng)
            length = origin.provenance.get("length_s")
            _COMPANIONS[ref] = simulate_rir(room, geo, origin.sample_rate, max_length=length,
                                            seed=int(seed))
        rir = _COMPANIONS[ref]
    else:
        rir = pool.rirs[ref]
    return resample(rir.h, fs) if rir.sample_rate != fs else rir.h


def materialize(spec, pool, cfg):
    """Render one :class:`MixtureSpec` into a :class:`Sample`."""
    fs = cfg.sample_rate
    n_out = int(round(spec.duration * fs))
    rng = np.random.default_rng(spec.seed)
    speech = SampleBuffer(_load_source(spec.speech_ref, n_out, fs, rng, "speech", cfg.level_rms), fs)
    noise = SampleBuffer(_load_source(spec.noise_ref, n_out, fs, rng, "noise", cfg.level_rms), fs)
    h_s = _resolve_rir(pool, spec.speech_rir_ref, fs)
    h_n = _resolve_rir(pool, spec.noise_rir_ref, fs)
    x = SampleBuffer(fix_length(convolve(speech, h_s, method="fft").samples, n_out), fs)
    nr = SampleBuffer(fix_length(convolve(noise, h_n, method="fft").samples, n_out), fs)
    if not np.any(nr.samples):
        raise InvalidArgumentError(f"noise {spec.noise_ref} is silent after reverberation")
    y, n_scaled, _ = mix_at_snr(x, nr, spec.snr_db)
    # common gain keeps y = x + n and the SNR while fixing the mixture level
    g = cfg.level_rms / (_rms(y.samples) + 1e-300)
    y = SampleBuffer(y.samples * g, fs)
    x = SampleBuffer(x.samples * g, fs)
    n_scaled = SampleBuffer(n_scaled.samples * g, fs)
    label = pool.rirs[spec.speech_rir_ref].ground_truth_t60
    return Sample(y, x, n_scaled, float(label), spec)


def sample_digest(sample):
    h = hashlib.sha256()
    for buf in (sample.y, sample.x, sample.n):
        h.update(np.asarray(buf.samples, dtype="<f4").tobytes())
    h.update(repr(float(sample.t60_label)).encode())
    return h.hexdigest()


def content_hash(digests):
    h = hashlib.sha256()
    for d in digests:
        h.update(d.encode())
    return h.hexdigest()


_WORKER = {}


def _worker_init(rir_records, cfg):
    _WORKER["pool"] = RirPool([Rir(SampleBuffer(h, fs), prov, t60)
                               for h, fs, prov, t60 in rir_records])
    _WORKER["cfg"] = cfg


def _worker_render(args):
    i, spec, out_dir = args
    sample = materialize(spec, _WORKER["pool"], _WORKER["cfg"])
    if out_dir is not None:
        write_sample(out_dir, i, sample)
    return sample_digest(sample)


def iter_samples(manifest, pool):
    for spec in manifest.specs:
        yield materialize(spec, pool, manifest.config)


def build_dataset(cfg, pool, out_dir=None, jobs=1):
    """Draw a manifest, render every sample and return the manifest.

    With ``out_dir`` the samples are written as ``{i:05d}_{y,x,n}.wav``
    triplets plus ``{i:05d}.json`` label records, and the manifest as
    ``manifest.json``. ``jobs > 1`` renders in worker processes; output is
    identical to a serial run.
    """
    manifest = build_manifest(cfg, pool)
    render_manifest(manifest, pool, out_dir, jobs)
    return manifest


def render_manifest(manifest, pool, out_dir=None, jobs=1):
    """(Re)materialize a manifest, filling in its content hash."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(i, s, out_dir) for i, s in enumerate(manifest.specs)]
    if jobs > 1 and len(tasks) > 1:
        records = [(np.asarray(pool.rirs[k].h.samples), pool.rirs[k].sample_rate,
                    dict(pool.rirs[k].provenance, id=k), pool.rirs[k].ground_truth_t60)
                   for k in pool.ids]
        with ProcessPoolExecutor(jobs, initializer=_worker_init,
                                 initargs=(records, manifest.config)) as ex:
            digests = list(ex.map(_worker_render, tasks, chunksize=4))
    else:
        digests = []
        for i, spec, _ in tasks:
            sample = materialize(spec, pool, manifest.config)
            if out_dir is not None:
                write_sample(out_dir, i, sample)
            digests.append(sample_digest(sample))
    manifest.content_hash = content_hash(digests)
    if out_dir is not None:
        manifest.save(Path(out_dir) / "manifest.json")
    return manifest


def write_sample(out_dir, index, sample):
    out_dir = Path(out_dir)
    stem = f"{index:05d}"
    for tag in ("y", "x", "n"):
        write_wav(out_dir / f"{stem}_{tag}.wav", getattr(sample, tag), fmt="float32")
    record = {"index": index, "t60": sample.t60_label,
              "spec": asdict(sample.spec) if sample.spec else None}
    (out_dir / f"{stem}.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def read_sample(out_dir, index):
    out_dir = Path(out_dir)
    stem = f"{index:05d}"
    bufs = [read_wav(out_dir / f"{stem}_{tag}.wav") for tag in ("y", "x", "n")]
    record = json.loads((out_dir / f"{stem}.json").read_text())
    spec = MixtureSpec(**record["spec"]) if record.get("spec") else None
    return Sample(*bufs, float(record["t60"]), spec)


def list_samples(out_dir):
    return sorted(int(p.stem) for p in Path(out_dir).glob("[0-9]*.json"))


# --- features -----------------------------------------------------------------
def sample_features(sample, cfg=None):
    """Magnitude spectrograms ``(|Y|, |X|, |N|)`` as float32 ``(T, 161)``."""
    cfg = cfg or StftConfig()
    return tuple(magnitude(stft(b, cfg)).astype(np.float32)
                 for b in (sample.y, sample.x, sample.n))


@dataclass
class FeatureSet:
    """Stacked features for training: arrays ``(n, T, K)`` and labels ``(n,)``."""

    magY: np.ndarray
    magX: np.ndarray
    magN: np.ndarray
    t60: np.ndarray

    def __len__(self):
        return self.t60.shape[0]

    def subset(self, idx):
        return FeatureSet(self.magY[idx], self.magX[idx], self.magN[idx], self.t60[idx])

    @classmethod
    def from_samples(cls, samples, cfg=None):
        feats = [sample_features(s, cfg) for s in samples]
        if not feats:
            raise InvalidArgumentError("no samples")
        return cls(np.stack([f[0] for f in feats]), np.stack([f[1] for f in feats]),
                   np.stack([f[2] for f in feats]),
                   np.array([s.t60_label for s in samples], dtype=np.float32))

    @classmethod
    def from_directory(cls, out_dir, cfg=None):
        return cls.from_samples([read_sample(out_dir, i) for i in list_samples(out_dir)], cfg)
