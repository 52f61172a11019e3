"""Mask-estimation network (NE-NET) and reverberation-time regressor (RE-NET).

Both share one topology: a five-block gated convolutional encoder that
halves the frequency axis ``161 -> 79 -> 39 -> 19 -> 9 -> 4``, a stack of
dilated temporal convolution units on the flattened bottleneck, and then
either two mirrored decoders with skip connections (NE-NET) or a frame-wise
fully connected head (RE-NET). Every layer is causal in time.

Parameters live in plain ordered dicts mapping hierarchical names such as
``ne_net.encoder.conv2d_glu_1.content_weight`` to :class:`Tensor` objects.
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (Tensor, concat, conv2d, conv_transpose2d, cumulative_layer_norm,
                       dilated_conv1d, glu_split, instance_norm, linear, mul, no_grad, prelu,
                       relu)
from .autodiff.tensor import DEFAULT_DTYPE
from .exceptions import ConfigurationError, InvalidArgumentError

N_BINS = 161
ALLOWED_DILATIONS = (1, 2, 4, 8, 16)
HEAD_BIAS = 0.5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters shared by both networks.

    ``norm`` selects the normalization after each gated block:
    ``"cumulative"`` (running statistics over frames seen so far, causal) or
    ``"instance"`` (statistics over the whole time-frequency plane).
    """

    preset: str = "desk"
    ne_width: int = 8
    re_width: int = 4
    ne_tcn_channels: int = 8
    re_tcn_channels: int = 4
    n_bins: int = N_BINS
    tcn_groups: int = 3
    dilations: tuple = ALLOWED_DILATIONS
    tcn_kernel: int = 5
    re_inputs: int = 3
    norm: str = "cumulative"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        for key in ("ne_width", "re_width", "ne_tcn_channels", "re_tcn_channels",
                    "tcn_groups", "tcn_kernel"):
            if int(getattr(self, key)) < 1:
                raise ConfigurationError(f"model.{key} must be >= 1")
        if not self.dilations or any(d not in ALLOWED_DILATIONS for d in self.dilations):
            raise ConfigurationError(f"model.dilations must be drawn from {ALLOWED_DILATIONS}")
        if self.n_bins != N_BINS:
            raise ConfigurationError("model.n_bins must be 161 (320-point FFT)")
        if self.re_inputs not in (2, 3):
            raise ConfigurationError("model.re_inputs must be 2 or 3")
        if self.norm not in ("cumulative", "instance"):
            raise ConfigurationError("model.norm must be 'cumulative' or 'instance'")

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigurationError(
                f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
        params = dict(PRESETS[name])
        params.update(overrides)
        return cls(preset=name, **params)

    def to_dict(self):
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def receptive_field(self):
        """Frames of past context seen by one temporal stack."""
        per_group = sum((self.tcn_kernel - 1) * d for d in self.dilations)
        return 1 + self.tcn_groups * per_group


PRESETS = {
    "paper": dict(ne_width=64, re_width=10, ne_tcn_channels=64, re_tcn_channels=10),
    "desk": dict(ne_width=8, re_width=4, ne_tcn_channels=8, re_tcn_channels=4),
    # smallest network exercising every code path; used for gradient checks
    "tiny": dict(ne_width=2, re_width=2, ne_tcn_channels=2, re_tcn_channels=2,
                 tcn_groups=1, dilations=(1, 2)),
}

ENCODER_KERNELS = ((2, 5), (2, 3), (2, 3), (2, 3), (2, 3))
DECODER_KERNELS = ((2, 3), (2, 3), (2, 3), (2, 3), (2, 5))


def frequency_ladder(n_bins=N_BINS):
    """Bin counts after each encoder block, starting with the input."""
    sizes = [n_bins]
    for _, kf in ENCODER_KERNELS:
        sizes.append((sizes[-1] - kf) // 2 + 1)
    return sizes


# --- initialization -------------------------------------------------------
class _Init:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params = {}

    def _add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype),
                                   requires_grad=True, dtype=self.dtype, name=name)

    def kaiming(self, name, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def const(self, name, shape, value):
        self._add(name, np.full(shape, value))

    def gated_block(self, prefix, c_in, c_out, kernel, transposed):
        kt, kf = kernel
        shape = (c_in, c_out, kt, kf) if transposed else (c_out, c_in, kt, kf)
        for branch in ("content", "gate"):
            self.kaiming(f"{prefix}.{branch}_weight", shape, c_in * kt * kf)
            self.const(f"{prefix}.{branch}_bias", (c_out,), 0.0)
        self.norm(prefix, c_out)
        self.const(f"{prefix}.prelu_slope", (c_out,), 0.25)

    def norm(self, prefix, channels, tag="norm"):
        self.const(f"{prefix}.{tag}_gamma", (channels,), 1.0)
        self.const(f"{prefix}.{tag}_beta", (channels,), 0.0)

    def linear(self, prefix, n_in, n_out):
        self.kaiming(f"{prefix}.weight", (n_in, n_out), n_in)
        self.const(f"{prefix}.bias", (n_out,), 0.0)

    def encoder(self, prefix, c_in, width):
        for i, kernel in enumerate(ENCODER_KERNELS, start=1):
            self.gated_block(f"{prefix}.encoder.conv2d_glu_{i}", c_in if i == 1 else width,
                             width, kernel, transposed=False)

    def tcn(self, prefix, features, channels, cfg):
        k = cfg.tcn_kernel
        for g in range(1, cfg.tcn_groups + 1):
            for u in range(1, len(cfg.dilations) + 1):
                p = f"{prefix}.tcn.group_{g}.unit_{u}"
                self.linear(f"{p}.in_proj", features, channels)
                self.const(f"{p}.prelu1_slope", (channels,), 0.25)
                self.norm(p, channels, "norm1")
                for branch in ("content", "gate"):
                    self.kaiming(f"{p}.{branch}_weight", (k, channels, channels), k * channels)
                    self.const(f"{p}.{branch}_bias", (channels,), 0.0)
                self.const(f"{p}.prelu2_slope", (channels,), 0.25)
                self.norm(p, channels, "norm2")
                self.linear(f"{p}.out_proj", channels, features)

    def decoder(self, prefix, width):
        for i, kernel in enumerate(DECODER_KERNELS, start=1):
            c_out = 1 if i == len(DECODER_KERNELS) else width
            self.gated_block(f"{prefix}.deconv2d_glu_{i}", 2 * width, c_out, kernel,
                             transposed=True)


def init_ne_net(cfg=None, seed=0, dtype=DEFAULT_DTYPE):
    """Fresh NE-NET parameters (Kaiming-uniform weights, zero biases,
    unit norm gains, PReLU slopes 0.25)."""
    cfg = cfg or ModelConfig()
    init = _Init(np.random.default_rng(seed), dtype)
    w = cfg.ne_width
    feats = w * frequency_ladder(cfg.n_bins)[-1]
    init.encoder("ne_net", 1, w)
    init.tcn("ne_net", feats, cfg.ne_tcn_channels, cfg)
    for which in ("speech", "noise"):
        init.decoder(f"ne_net.decoder_{which}", w)
        init.linear(f"ne_net.head_{which}", cfg.n_bins, cfg.n_bins)
    return init.params


def init_re_net(cfg=None, seed=1, dtype=DEFAULT_DTYPE):
    """Fresh RE-NET parameters; the head maps each frame's bottleneck
    features to one reverberation time and starts out predicting
    ``HEAD_BIAS`` seconds everywhere."""
    cfg = cfg or ModelConfig()
    init = _Init(np.random.default_rng(seed), dtype)
    w = cfg.re_width
    feats = w * frequency_ladder(cfg.n_bins)[-1]
    init.encoder("re_net", cfg.re_inputs, w)
    init.tcn("re_net", feats, cfg.re_tcn_channels, cfg)
    # zero weights: every frame starts at a typical room, so the output ReLU
    # is not dead on arrival
    init.const("re_net.head.weight", (feats, 1), 0.0)
    init.const("re_net.head.bias", (1,), HEAD_BIAS)
    return init.params


# --- forward building blocks ---------------------------------------------
def _gated_block(x, P, prefix, cfg, transposed):
    op = conv_transpose2d if transposed else conv2d
    w = concat([P[f"{prefix}.content_weight"], P[f"{prefix}.gate_weight"]],
               axis=1 if transposed else 0)
    b = concat([P[f"{prefix}.content_bias"], P[f"{prefix}.gate_bias"]], axis=0)
    y = glu_split(op(x, w, b), axis=1)
    y = instance_norm(y, P[f"{prefix}.norm_gamma"], P[f"{prefix}.norm_beta"],
                      causal=cfg.norm == "cumulative")
    return prelu(y, P[f"{prefix}.prelu_slope"], axis=1)


def _encoder(x, P, prefix, cfg):
    skips = []
    for i in range(1, len(ENCODER_KERNELS) + 1):
        x = _gated_block(x, P, f"{prefix}.encoder.conv2d_glu_{i}", cfg, transposed=False)
        skips.append(x)
    return x, skips


def tcn_unit(x, P, prefix, dilation):
    """Residual gated dilated unit on ``(batch, frames, features)``."""
    h = linear(x, P[f"{prefix}.in_proj.weight"], P[f"{prefix}.in_proj.bias"])
    h = prelu(h, P[f"{prefix}.prelu1_slope"], axis=-1)
    h = cumulative_layer_norm(h, P[f"{prefix}.norm1_gamma"], P[f"{prefix}.norm1_beta"])
    w = concat([P[f"{prefix}.content_weight"], P[f"{prefix}.gate_weight"]], axis=2)
    b = concat([P[f"{prefix}.content_bias"], P[f"{prefix}.gate_bias"]], axis=0)
    h = glu_split(dilated_conv1d(h, w, b, dilation), axis=-1)
    h = prelu(h, P[f"{prefix}.prelu2_slope"], axis=-1)
    h = cumulative_layer_norm(h, P[f"{prefix}.norm2_gamma"], P[f"{prefix}.norm2_beta"])
    h = linear(h, P[f"{prefix}.out_proj.weight"], P[f"{prefix}.out_proj.bias"])
    return x + h


def _tcn_stack(x, P, prefix, cfg):
    for g in range(1, cfg.tcn_groups + 1):
        for u, d in enumerate(cfg.dilations, start=1):
            x = tcn_unit(x, P, f"{prefix}.tcn.group_{g}.unit_{u}", d)
    return x


def _to_sequence(x):
    # (n, C, T, F) -> (n, T, C*F): channel-major flattening per frame
    n, c, t, f = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, c * f)


def _to_map(x, channels):
    n, t, cf = x.shape
    return x.reshape(n, t, channels, cf // channels).transpose(0, 2, 1, 3)


def _decoder(x, skips, P, prefix, cfg):
    for i in range(1, len(DECODER_KERNELS) + 1):
        x = concat([x, skips[-i]], axis=1)
        x = _gated_block(x, P, f"{prefix}.deconv2d_glu_{i}", cfg, transposed=True)
    return x


def _as_batch(x, channels, name):
    """Accept (T, F), (C, T, F) or (n, C, T, F); return a 4-D tensor and
    whether the caller passed a single example."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    single = data.ndim < 4
    if data.ndim == 2:
        if channels != 1:
            raise InvalidArgumentError(f"{name} needs {channels} stacked channels")
        shape = (1, 1) + data.shape
    elif data.ndim == 3:
        shape = (1,) + data.shape
    elif data.ndim == 4:
        shape = data.shape
    else:
        raise InvalidArgumentError(f"{name} must be 2-, 3- or 4-D, got {data.shape}")
    if shape[1] != channels or shape[3] != N_BINS or shape[2] < 1:
        raise InvalidArgumentError(
            f"{name} has shape {data.shape}; expected {channels} x T x {N_BINS}")
    if isinstance(x, Tensor):
        return x.reshape(shape), single
    return Tensor(data.reshape(shape)), single


def _dtype_of(params):
    return next(iter(params.values())).dtype


def ne_net_forward(magY, params, cfg=None):
    """Speech and noise masks for a noisy magnitude spectrogram.

    Parameters
    ----------
    magY : Tensor or ndarray
        ``(T, 161)``, ``(1, T, 161)`` or a batch ``(n, 1, T, 161)``.
    params : dict
        From :func:`init_ne_net`.

    Returns
    -------
    m_speech, m_noise : Tensor
        Nonnegative masks shaped ``(T, 161)`` for a single input or
        ``(n, T, 161)`` for a batch.
    """
    cfg = cfg or ModelConfig()
    x, single = _as_batch(magY, 1, "magY")
    x = _cast(x, _dtype_of(params))
    P = params
    code, skips = _encoder(x, P, "ne_net", cfg)
    seq = _tcn_stack(_to_sequence(code), P, "ne_net", cfg)
    bottleneck = _to_map(seq, cfg.ne_width)
    masks = []
    for which in ("speech", "noise"):
        y = _decoder(bottleneck, skips, P, f"ne_net.decoder_{which}", cfg)
        n, _, t, f = y.shape
        y = relu(linear(y.reshape(n, t, f), P[f"ne_net.head_{which}.weight"],
                        P[f"ne_net.head_{which}.bias"]))
        masks.append(y.reshape(t, f) if single else y)
    return masks[0], masks[1]


def _cast(x, dtype):
    if x.dtype == dtype:
        return x
    if x.requires_grad:
        raise InvalidArgumentError(f"input dtype {x.dtype} does not match parameters {dtype}")
    return Tensor(x.data.astype(dtype), dtype=dtype)


def apply_masks(magY, m_speech, m_noise):
    """Masked magnitudes ``(m_speech * |Y|, m_noise * |Y|)``."""
    shapes = {tuple(np.shape(a.data if isinstance(a, Tensor) else a))
              for a in (magY, m_speech, m_noise)}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"apply_masks: shapes differ {sorted(shapes)}")
    if not any(isinstance(a, Tensor) for a in (magY, m_speech, m_noise)):
        magY = np.asarray(magY)
        return np.asarray(m_speech) * magY, np.asarray(m_noise) * magY
    return mul(m_speech, magY), mul(m_noise, magY)


def re_net_forward(stack, params, cfg=None):
    """Per-frame reverberation time (seconds) from stacked magnitudes.

    ``stack`` is ``(C, T, 161)`` or ``(n, C, T, 161)`` with channels
    ``(|Y|, |X_hat|, |N_hat|)`` (or the first two when ``cfg.re_inputs == 2``).
    Returns a Tensor ``(T,)`` or ``(n, T)`` of nonnegative values.
    """
    cfg = cfg or ModelConfig()
    x, single = _as_batch(stack, cfg.re_inputs, "stack")
    x = _cast(x, _dtype_of(params))
    code, _ = _encoder(x, params, "re_net", cfg)
    seq = _tcn_stack(_to_sequence(code), params, "re_net", cfg)
    out = relu(linear(seq, params["re_net.head.weight"], params["re_net.head.bias"]))
    n, t, _ = out.shape
    return out.reshape(t) if single else out.reshape(n, t)


def two_stage_forward(magY, ne_params, re_params, cfg=None):
    """Masks, masked magnitudes and per-frame T60 for a batch or a single input."""
    cfg = cfg or ModelConfig()
    x, single = _as_batch(magY, 1, "magY")
    x = _cast(x, _dtype_of(ne_params))
    m_s, m_n = ne_net_forward(x, ne_params, cfg)
    n, _, t, f = x.shape
    y = x.reshape(n, t, f)
    est_x, est_n = apply_masks(y, m_s, m_n)
    parts = [y, est_x, est_n][:cfg.re_inputs]
    stack = concat([p.reshape(n, 1, t, f) for p in parts], axis=1)
    t60 = re_net_forward(stack, re_params, cfg)
    if single:
        return (m_s.reshape(t, f), m_n.reshape(t, f), est_x.reshape(t, f),
                est_n.reshape(t, f), t60.reshape(t))
    return m_s, m_n, est_x, est_n, t60


def estimate_t60_utterance(magY, ne_params, re_params, cfg=None):
    """T60 of the last frame, which has seen the whole utterance."""
    with no_grad():
        *_, t60 = two_stage_forward(magY, ne_params, re_params, cfg)
    return float(t60.data[..., -1]) if t60.ndim == 1 else t60.data[:, -1].astype(float)


def frame_estimates(magY, ne_params, re_params, cfg=None):
    """Per-frame T60 track as an ndarray (inference only)."""
    with no_grad():
        *_, t60 = two_stage_forward(magY, ne_params, re_params, cfg)
    return np.array(t60.data, dtype=np.float64)


def count_parameters(params):
    return int(sum(p.size for p in params.values()))


def freeze(params):
    """Read-only copy safe to share between inference threads."""
    out = {}
    for name, p in params.items():
        arr = np.array(p.data, copy=True)
        arr.flags.writeable = False
        out[name] = Tensor(arr, dtype=arr.dtype, name=name)
    return out
