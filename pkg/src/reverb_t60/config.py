"""TOML run configuration with strict key checking and a content hash."""

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import DatasetConfig, RirGenConfig
from .evaluation import REPORT_CLAMP, SWEEP_MAX, SWEEP_STEP
from .exceptions import ConfigurationError
from .models import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    snrs: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)
    clamp: float = REPORT_CLAMP
    sweep_step: float = SWEEP_STEP
    sweep_max: float = SWEEP_MAX

    def __post_init__(self):
        object.__setattr__(self, "snrs", tuple(float(s) for s in self.snrs))
        if self.sweep_step <= 0 or self.sweep_max < self.sweep_step:
            raise ConfigurationError("eval.sweep_step must be positive and <= sweep_max")


@dataclass(frozen=True)
class RunSettings:
    out_dir: str = "runs"
    jobs: int = 1
    log_level: str = "INFO"

    def __post_init__(self):
        if int(self.jobs) < 1:
            raise ConfigurationError("run.jobs must be >= 1")


_SECTIONS = {
    "run": RunSettings,
    "rirs": RirGenConfig,
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build(section, cls, values):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    if cls is ModelConfig:
        preset = values.get("preset", "desk")
        rest = {k: v for k, v in values.items() if k != "preset"}
        return ModelConfig.from_preset(preset, **rest)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"[{section}]: {exc}") from exc


def _plain(obj):
    return json.loads(json.dumps(asdict(obj)))


@dataclass(frozen=True)
class RunConfig:
    """All sections of one experiment.

    Every artifact written by the command-line tools records
    :meth:`hash`, a digest over the fully resolved (defaults included)
    configuration.
    """

    run: RunSettings = field(default_factory=RunSettings)
    rirs: RirGenConfig = field(default_factory=RirGenConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
        parts = {}
        for name, sec_cls in _SECTIONS.items():
            values = data.get(name, {})
            if not isinstance(values, dict):
                raise ConfigurationError(f"[{name}] must be a table")
            parts[name] = _build(name, sec_cls, values)
        return cls(**parts)

    @classmethod
    def from_toml(cls, path):
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid TOML in {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return {name: _plain(getattr(self, name)) for name in _SECTIONS}

    def hash(self):
        """Digest of everything except ``[run]``, which only steers I/O."""
        body = {k: v for k, v in self.to_dict().items() if k != "run"}
        blob = json.dumps(body, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def override(self, section, **values):
        """Copy with some keys of one section replaced (flags win over files)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        if section == "model":
            merged = dict(_plain(current), **values)
            if "preset" in values:
                merged = dict(values)
            new = _build(section, ModelConfig, merged)
        else:
            unknown = set(values) - {f.name for f in fields(type(current))}
            if unknown:
                raise ConfigurationError(f"unknown key(s) for [{section}]: {sorted(unknown)}")
            new = replace(current, **values)
        return replace(self, **{section: new})
