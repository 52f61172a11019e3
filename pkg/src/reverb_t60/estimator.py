"""scikit-learn style wrappers around the two-stage network."""

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import load_checkpoint, save_checkpoint
from .dataset import FeatureSet
from .dsp import PIPELINE_RATE, SampleBuffer, StftConfig, magnitude, resample, stft
from .exceptions import InvalidArgumentError
from .models import (ModelConfig, estimate_t60_utterance, frame_estimates, init_ne_net,
                     init_re_net)
from .training import TrainConfig, train_stage1, train_stage2
from .validation import check_sample_rate, check_waveform_batch

BUNDLE_FILES = ("ne.ckpt", "re.ckpt", "bundle.json")


def waveform_features(samples, sample_rate=PIPELINE_RATE):
    """Magnitude spectrogram ``(T, 161)`` of one waveform, resampled to
    16 kHz first when needed."""
    buf = SampleBuffer(np.asarray(samples, dtype=np.float64), sample_rate)
    if buf.sample_rate != PIPELINE_RATE:
        buf = resample(buf, PIPELINE_RATE)
    cfg = StftConfig()
    if len(buf) < cfg.window_len:
        raise InvalidArgumentError(
            f"audio is too short: {len(buf)} samples, need at least {cfg.window_len}")
    return magnitude(stft(buf, cfg)).astype(np.float32)


class MagnitudeSpectrogram(BaseEstimator, TransformerMixin):
    """Waveforms to STFT magnitude frames.

    Stateless; ``transform`` returns a 3-D array when every input has the
    same length and a list of ``(T_i, 161)`` arrays otherwise.
    """

    def __init__(self, sample_rate=PIPELINE_RATE):
        self.sample_rate = sample_rate

    def fit(self, X, y=None):
        check_sample_rate(self.sample_rate)
        return self

    def transform(self, X):
        mags = [waveform_features(x, self.sample_rate) for x in check_waveform_batch(X)]
        if len({m.shape for m in mags}) == 1:
            return np.stack(mags)
        return mags


class NoiseAwareT60Estimator(RegressorMixin, BaseEstimator):
    """Blind T60 regression from noisy reverberant speech.

    A noise-estimation network first splits the noisy spectrogram into
    speech and noise magnitudes; a second network regresses a per-frame
    reverberation time from the stacked spectrograms. Because both
    networks are causal, the last frame carries the utterance estimate.

    Parameters
    ----------
    preset : {"desk", "paper", "tiny"}
        Architecture size.
    epochs_stage1, epochs_stage2 : int
        Epoch budgets of the two training stages.
    max_steps_stage1, max_steps_stage2 : int or None
        Optional caps on optimizer steps.
    batch_size : int
    alpha, lam : float
        Speech/noise weighting and the weight of the enhancement loss
        during joint training.
    sample_rate : int
        Rate of the waveforms given to ``fit`` and ``predict``.
    random_state : int
        Seeds initialization and batch order.

    Attributes
    ----------
    ne_params_, re_params_ : dict
        Trained weights.
    history_ : dict
        Per-stage lists of epoch records.
    """

    def __init__(self, preset="desk", epochs_stage1=60, epochs_stage2=60,
                 max_steps_stage1=None, max_steps_stage2=None, batch_size=8, alpha=0.5,
                 lam=0.1, sample_rate=PIPELINE_RATE, random_state=0):
        self.preset = preset
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.max_steps_stage1 = max_steps_stage1
        self.max_steps_stage2 = max_steps_stage2
        self.batch_size = batch_size
        self.alpha = alpha
        self.lam = lam
        self.sample_rate = sample_rate
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(alpha=self.alpha, lam=self.lam, epochs_stage1=self.epochs_stage1,
                           epochs_stage2=self.epochs_stage2,
                           max_steps_stage1=self.max_steps_stage1,
                           max_steps_stage2=self.max_steps_stage2,
                           batch_size=self.batch_size, seed=self.random_state)

    def fit(self, X, y, speech=None, noise=None):
        """Train both stages.

        Parameters
        ----------
        X : sequence of 1-D arrays or FeatureSet
            Noisy reverberant mixtures (equal lengths). A FeatureSet
            already carries targets, and ``y`` is then ignored.
        y : array_like of shape (n_samples,)
            Ground-truth T60 in seconds.
        speech, noise : sequence of 1-D arrays
            The reverberant speech and noise components of each mixture,
            needed as enhancement targets.
        """
        if isinstance(X, FeatureSet):
            feats = X
        else:
            if speech is None or noise is None:
                raise InvalidArgumentError("fit needs the speech and noise components")
            ys, xs, ns = (check_waveform_batch(a, name) for a, name in
                          ((X, "X"), (speech, "speech"), (noise, "noise")))
            if not len(ys) == len(xs) == len(ns) == len(np.ravel(y)):
                raise InvalidArgumentError("X, y, speech and noise differ in length")
            mags = [np.stack([waveform_features(w, self.sample_rate) for w in group])
                    for group in (ys, xs, ns)]
            feats = FeatureSet(*mags, np.asarray(y, dtype=np.float32).ravel())
        self.model_config_ = ModelConfig.from_preset(self.preset)
        cfg = self._train_config()
        self.ne_params_ = init_ne_net(self.model_config_, seed=self.random_state)
        self.re_params_ = init_re_net(self.model_config_, seed=self.random_state + 1)
        self.history_ = {
            "stage1": train_stage1(self.ne_params_, feats, cfg, self.model_config_),
            "stage2": train_stage2(self.ne_params_, self.re_params_, feats, cfg,
                                   self.model_config_),
        }
        return self

    def _features(self, X):
        if isinstance(X, FeatureSet):
            return list(X.magY)
        return [waveform_features(x, self.sample_rate) for x in check_waveform_batch(X)]

    def predict(self, X):
        """Utterance-level T60 (last-frame output) per input, in seconds."""
        check_is_fitted(self, "ne_params_")
        return np.array([estimate_t60_utterance(m, self.ne_params_, self.re_params_,
                                                self.model_config_)
                         for m in self._features(X)])

    def predict_frames(self, X):
        """Per-frame T60 tracks, one array of length ``T_i`` per input."""
        check_is_fitted(self, "ne_params_")
        return [frame_estimates(m, self.ne_params_, self.re_params_, self.model_config_)
                for m in self._features(X)]

    def save(self, directory, config_hash=None, meta=None):
        check_is_fitted(self, "ne_params_")
        save_bundle(directory, self.ne_params_, self.re_params_, self.model_config_,
                    config_hash, meta)

    @classmethod
    def load(cls, directory):
        ne, re, model_cfg, _ = load_bundle(directory)
        est = cls(preset=model_cfg.preset)
        est.model_config_, est.ne_params_, est.re_params_ = model_cfg, ne, re
        return est


def save_bundle(directory, ne_params, re_params, model_cfg, config_hash=None, meta=None):
    """Write a self-describing inference bundle directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "ne.ckpt", ne_params, model_cfg.to_dict(), config_hash, meta)
    save_checkpoint(d / "re.ckpt", re_params, model_cfg.to_dict(), config_hash, meta)
    record = {"model": model_cfg.to_dict(), "config_hash": config_hash, "meta": meta or {}}
    (d / "bundle.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def load_bundle(directory):
    """Return ``(ne_params, re_params, model_config, record)``."""
    d = Path(directory)
    missing = [f for f in BUNDLE_FILES if not (d / f).exists()]
    if missing:
        raise InvalidArgumentError(f"{d} is not a model bundle (missing {missing})")
    record = json.loads((d / "bundle.json").read_text())
    model_cfg = ModelConfig(**record["model"])
    ne, _ = load_checkpoint(d / "ne.ckpt", requires_grad=False)
    re, _ = load_checkpoint(d / "re.ckpt", requires_grad=False)
    return ne, re, model_cfg, record
