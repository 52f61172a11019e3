"""Adam with bias correction and global-norm gradient clipping."""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import InvalidArgumentError, TrainingDivergedError


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """Apply one Adam update in place.

    Parameters
    ----------
    params : dict of str -> Tensor
    grads : dict of str -> ndarray or None
        Missing or ``None`` entries count as zero gradient.
    state : AdamState
    lr : float

    Raises
    ------
    TrainingDivergedError
        If any gradient contains NaN or infinity; parameters are left
        untouched.
    """
    if lr < 0:
        raise InvalidArgumentError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise InvalidArgumentError(
                f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr:
            update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            p.data -= update.astype(p.dtype, copy=False)


def global_grad_norm(param_dicts):
    total = 0.0
    for params in param_dicts:
        for p in params.values():
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(param_dicts, max_norm):
    """Rescale gradients so their joint L2 norm is at most ``max_norm``;
    returns the norm before clipping."""
    norm = global_grad_norm(param_dicts)
    if not np.isfinite(norm):
        raise TrainingDivergedError("gradient norm is not finite")
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for params in param_dicts:
            for p in params.values():
                if p.grad is not None:
                    p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


class Adam:
    """Stateful wrapper over :func:`adam_step` for one parameter dict."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def step(self):
        adam_step(self.params, {k: p.grad for k, p in self.params.items()},
                  self.state, self.lr)
