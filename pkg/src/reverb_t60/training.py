"""Losses and the two-stage optimization schedule.

Stage 1 fits NE-NET on the weighted speech/noise magnitude loss. Stage 2
trains RE-NET on the per-frame T60 loss while fine-tuning NE-NET through
the joint loss ``L_RE + lambda * L_NE``.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import (Adam, Tensor, clip_grad_norm, global_grad_norm, no_grad,
                       save_checkpoint)
from .autodiff.tensor import sub, tsum
from .exceptions import ConfigurationError, InvalidArgumentError, TrainingDivergedError
from .models import ModelConfig, apply_masks, ne_net_forward, two_stage_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    lam: float = 0.1
    lr_stage1: float = 1e-3
    lr_ne_stage2: float = 1e-4
    lr_re_stage2: float = 1e-3
    epochs_stage1: int = 60
    epochs_stage2: int = 60
    batch_size: int = 8
    patience: int = 3
    clip_norm: float = 5.0
    loss_reduction: str = "mean"
    max_steps_stage1: int | None = None
    max_steps_stage2: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("train.alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigurationError("train.lam must be >= 0")
        if min(self.lr_stage1, self.lr_ne_stage2, self.lr_re_stage2) < 0:
            raise ConfigurationError("learning rates must be >= 0")
        if self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("train.batch_size and train.patience must be >= 1")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigurationError("train.loss_reduction must be 'mean' or 'sum'")


# --- losses -----------------------------------------------------------------
def _reduce_sq(diff, reduction):
    sq = diff * diff
    total = tsum(sq)
    if reduction == "sum":
        return total
    return total * (1.0 / sq.size)


def _as_t(a):
    return a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64),
                                                  dtype=np.float64)


def _match(a, b, name):
    if tuple(a.shape) != tuple(b.shape):
        raise InvalidArgumentError(f"{name}: shapes differ {a.shape} vs {b.shape}")


def loss_ne(est_x, magX, est_n, magN, alpha=0.5, reduction="mean"):
    """``alpha * ||est_x - |X| ||^2 + (1 - alpha) * ||est_n - |N| ||^2``.

    With ``reduction="mean"`` each squared Frobenius norm is divided by its
    element count.
    """
    est_x, magX, est_n, magN = (_as_t(a) for a in (est_x, magX, est_n, magN))
    _match(est_x, magX, "loss_ne speech")
    _match(est_n, magN, "loss_ne noise")
    speech = _reduce_sq(sub(est_x, magX), reduction)
    noise = _reduce_sq(sub(est_n, magN), reduction)
    return speech * alpha + noise * (1.0 - alpha)


def loss_re(t_hat, t60, reduction="mean"):
    """Mean over frames (and batch) of ``(t_hat_l - t60)^2``.

    ``t_hat`` is ``(T,)`` with a scalar label or ``(n, T)`` with labels
    ``(n,)``.
    """
    t_hat = _as_t(t_hat)
    if t_hat.size == 0:
        raise InvalidArgumentError("loss_re needs at least one frame")
    label = np.asarray(t60, dtype=t_hat.dtype)
    if t_hat.ndim == 2:
        label = label.reshape(-1, 1)
    return _reduce_sq(sub(t_hat, Tensor(label, dtype=t_hat.dtype)), reduction)


def loss_joint(l_re, l_ne, lam=0.1):
    """``l_re + lam * l_ne``."""
    return l_re + l_ne * lam


# --- schedule -----------------------------------------------------------------
class PlateauSchedule:
    """Halve the learning rate after ``patience`` epochs without a new
    best validation loss."""

    def __init__(self, patience=3, factor=0.5):
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.stale = 0

    def update(self, val_loss):
        """Record one epoch; returns the multiplier to apply (1 or factor)."""
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return 1.0
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return self.factor
        return 1.0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    steps: int
    seconds: float


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_loss:.9g}", f"{r.val_loss:.9g}", f"{r.lr:.9g}"])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, v in snap.items():
        params[k].data[...] = v


def _check_finite(value, stage, epoch, step):
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"{stage}: loss became {value} at epoch {epoch}, step {step}")


def _stage1_loss(params, feats, idx, cfg, model_cfg):
    magY = feats.magY[idx][:, None]
    m_s, m_n = ne_net_forward(magY, params, model_cfg)
    y = Tensor(feats.magY[idx])
    est_x, est_n = apply_masks(y, m_s, m_n)
    return loss_ne(est_x, Tensor(feats.magX[idx]), est_n, Tensor(feats.magN[idx]),
                   cfg.alpha, cfg.loss_reduction)


def _stage2_losses(ne, re, feats, idx, cfg, model_cfg):
    _, _, est_x, est_n, t60 = two_stage_forward(feats.magY[idx][:, None], ne, re, model_cfg)
    l_ne = loss_ne(est_x, Tensor(feats.magX[idx]), est_n, Tensor(feats.magN[idx]),
                   cfg.alpha, cfg.loss_reduction)
    l_re = loss_re(t60, feats.t60[idx], cfg.loss_reduction)
    return l_re, l_ne, t60


def _evaluate(fn, feats, batch_size):
    if feats is None:
        return None
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(feats), batch_size):
            idx = np.arange(start, min(start + batch_size, len(feats)))
            total += float(fn(idx).item()) * len(idx)
            count += len(idx)
    return total / count


def _save(out_dir, name, params, model_cfg, meta, run_meta=None):
    if out_dir is None:
        return
    meta = dict(run_meta or {}, **meta)
    save_checkpoint(Path(out_dir) / name, params, model_cfg.to_dict(), model_cfg.hash(), meta)


def train_stage1(ne_params, train, cfg=None, model_cfg=None, val=None, out_dir=None,
                 step_callback=None, run_meta=None):
    """Adam on the NE loss with plateau halving.

    Parameters
    ----------
    ne_params : dict
        Updated in place; on return they hold the best-validation weights
        (training loss is used when ``val`` is None).
    train, val : FeatureSet
    out_dir : path, optional
        Receives ``stage1_last.ckpt``, ``stage1_best.ckpt`` and
        ``history_stage1.csv``.
    step_callback : callable, optional
        Called with ``(step, loss)`` after every optimizer step.
    run_meta : dict, optional
        Extra fields stored in every checkpoint header (e.g. a config hash).

    Returns
    -------
    history : list of EpochRecord
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    opt = Adam(ne_params, cfg.lr_stage1)
    sched = PlateauSchedule(cfg.patience)
    history, best_snap, best_val, step = [], None, np.inf, 0

    def val_fn(idx, feats=val):
        return _stage1_loss(ne_params, feats, idx, cfg, model_cfg)

    for epoch in range(1, cfg.epochs_stage1 + 1):
        if cfg.max_steps_stage1 is not None and step >= cfg.max_steps_stage1:
            break
        t0 = time.time()
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            if cfg.max_steps_stage1 is not None and step >= cfg.max_steps_stage1:
                break
            opt.zero_grad()
            loss = _stage1_loss(ne_params, train, idx, cfg, model_cfg)
            value = float(loss.item())
            _check_finite(value, "stage 1", epoch, step)
            loss.backward()
            clip_grad_norm([ne_params], cfg.clip_norm)
            opt.step()
            step += 1
            losses.append(value)
            if step_callback:
                step_callback(step, value)
        train_loss = float(np.mean(losses))
        val_loss = _evaluate(val_fn, val, cfg.batch_size)
        monitored = train_loss if val_loss is None else val_loss
        history.append(EpochRecord(epoch, train_loss, monitored, opt.lr, step,
                                   time.time() - t0))
        log.info("stage1 epoch %d: train %.6g val %.6g lr %.3g", epoch, train_loss,
                 monitored, opt.lr)
        if monitored < best_val:
            best_val, best_snap = monitored, _snapshot(ne_params)
            _save(out_dir, "stage1_best.ckpt", ne_params, model_cfg,
                  {"stage": 1, "epoch": epoch, "val_loss": monitored}, run_meta)
        _save(out_dir, "stage1_last.ckpt", ne_params, model_cfg, {"stage": 1, "epoch": epoch},
              run_meta)
        opt.lr *= sched.update(monitored)
    if best_snap is not None:
        _restore(ne_params, best_snap)
    if out_dir is not None:
        write_history(Path(out_dir) / "history_stage1.csv", history)
    return history


def train_stage2(ne_params, re_params, train, cfg=None, model_cfg=None, val=None,
                 out_dir=None, step_callback=None, run_meta=None):
    """Joint training: RE-NET at ``lr_re_stage2``, NE-NET at ``lr_ne_stage2``.

    Both parameter dicts are updated in place and end at the
    best-validation epoch. The monitored loss is the joint loss.
    """
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    opt_ne = Adam(ne_params, cfg.lr_ne_stage2)
    opt_re = Adam(re_params, cfg.lr_re_stage2)
    sched = PlateauSchedule(cfg.patience)
    history, best, best_val, step = [], None, np.inf, 0

    def val_fn(idx, feats=val):
        l_re, l_ne, _ = _stage2_losses(ne_params, re_params, feats, idx, cfg, model_cfg)
        return loss_joint(l_re, l_ne, cfg.lam)

    for epoch in range(1, cfg.epochs_stage2 + 1):
        if cfg.max_steps_stage2 is not None and step >= cfg.max_steps_stage2:
            break
        t0 = time.time()
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            if cfg.max_steps_stage2 is not None and step >= cfg.max_steps_stage2:
                break
            opt_ne.zero_grad()
            opt_re.zero_grad()
            l_re, l_ne, _ = _stage2_losses(ne_params, re_params, train, idx, cfg, model_cfg)
            loss = loss_joint(l_re, l_ne, cfg.lam)
            value = float(loss.item())
            _check_finite(value, "stage 2", epoch, step)
            loss.backward()
            clip_grad_norm([ne_params, re_params], cfg.clip_norm)
            opt_ne.step()
            opt_re.step()
            step += 1
            losses.append(value)
            if step_callback:
                step_callback(step, value)
        train_loss = float(np.mean(losses))
        val_loss = _evaluate(val_fn, val, cfg.batch_size)
        monitored = train_loss if val_loss is None else val_loss
        history.append(EpochRecord(epoch, train_loss, monitored, opt_re.lr, step,
                                   time.time() - t0))
        log.info("stage2 epoch %d: train %.6g val %.6g lr %.3g/%.3g", epoch, train_loss,
                 monitored, opt_ne.lr, opt_re.lr)
        if monitored < best_val:
            best_val, best = monitored, (_snapshot(ne_params), _snapshot(re_params))
            _save(out_dir, "stage2_ne_best.ckpt", ne_params, model_cfg,
                  {"stage": 2, "epoch": epoch, "val_loss": monitored}, run_meta)
            _save(out_dir, "stage2_re_best.ckpt", re_params, model_cfg,
                  {"stage": 2, "epoch": epoch, "val_loss": monitored}, run_meta)
        for tag, params in (("ne", ne_params), ("re", re_params)):
            _save(out_dir, f"stage2_{tag}_last.ckpt", params, model_cfg,
                  {"stage": 2, "epoch": epoch}, run_meta)
        factor = sched.update(monitored)
        opt_ne.lr *= factor
        opt_re.lr *= factor
    if best is not None:
        _restore(ne_params, best[0])
        _restore(re_params, best[1])
    if out_dir is not None:
        write_history(Path(out_dir) / "history_stage2.csv", history)
    return history


def ne_gradient_norm(ne_params, re_params, feats, idx, cfg=None, model_cfg=None):
    """Global gradient norm reaching NE-NET from one stage-2 batch."""
    cfg = cfg or TrainConfig()
    for p in list(ne_params.values()) + list(re_params.values()):
        p.grad = None
    l_re, l_ne, _ = _stage2_losses(ne_params, re_params, feats, idx, cfg, model_cfg
                                   or ModelConfig())
    loss_joint(l_re, l_ne, cfg.lam).backward()
    return global_grad_norm([ne_params])


def config_dict(cfg):
    return asdict(cfg)
