import csv

import numpy as np
import pytest

from reverb_t60.autodiff import load_checkpoint, read_header
from reverb_t60.dataset import FeatureSet
from reverb_t60.exceptions import ConfigurationError, InvalidArgumentError, TrainingDivergedError
from reverb_t60.models import ModelConfig, init_ne_net, init_re_net
from reverb_t60.training import (PlateauSchedule, TrainConfig, _evaluate, _stage1_loss,
                                 loss_joint, loss_ne, loss_re, ne_gradient_norm,
                                 train_stage1, train_stage2)

TINY = ModelConfig.from_preset("tiny")


def toy_features(n=4, t=12, seed=0):
    rng = np.random.default_rng(seed)
    x = np.abs(rng.standard_normal((n, t, 161))).astype(np.float32)
    noise = 0.5 * np.abs(rng.standard_normal((n, t, 161))).astype(np.float32)
    return FeatureSet(x + noise, x, noise, np.linspace(0.3, 1.2, n).astype(np.float32))


class TestLosses:
    def test_ne_by_hand(self):
        est_x, est_n = np.ones((2, 2)), np.zeros((2, 2))
        magX, magN = np.full((2, 2), 3.0), np.ones((2, 2))
        # speech: mean 4, noise: mean 1
        assert loss_ne(est_x, magX, est_n, magN, alpha=0.25).item() == pytest.approx(
            0.25 * 4 + 0.75 * 1)
        assert loss_ne(est_x, magX, est_n, magN, alpha=0.25, reduction="sum").item() == \
            pytest.approx(0.25 * 16 + 0.75 * 4)

    def test_alpha_one_ignores_noise(self, rng):
        a, b = rng.standard_normal((2, 3, 4))
        assert loss_ne(a, a, b, 100 + b, alpha=1.0).item() == 0.0

    def test_ne_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            loss_ne(np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(3))

    def test_re_by_hand(self):
        assert loss_re(np.array([0.5, 0.7, 0.9]), 0.7).item() == pytest.approx(0.08 / 3)
        batch = np.array([[1.0, 1.0], [0.0, 2.0]])
        assert loss_re(batch, [1.0, 1.0]).item() == pytest.approx(2.0 / 4)

    def test_re_empty(self):
        with pytest.raises(InvalidArgumentError):
            loss_re(np.zeros(0), 0.5)

    def test_joint(self):
        assert loss_joint(2.0, 10.0, lam=0.1) == pytest.approx(3.0)


def test_plateau_schedule():
    s = PlateauSchedule(patience=3)
    factors = [s.update(v) for v in [1.0, 0.9, 0.95, 0.95, 0.95, 0.8, 0.85]]
    assert factors == [1, 1, 1, 1, 0.5, 1, 1]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(alpha=1.5)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_stage1=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(loss_reduction="median")


def test_stage1_learns_and_writes(tmp_path):
    feats = toy_features()
    ne = init_ne_net(TINY, seed=0)
    cfg = TrainConfig(epochs_stage1=15, batch_size=2, lr_stage1=3e-3)
    steps = []
    hist = train_stage1(ne, feats, cfg, TINY, out_dir=tmp_path,
                        step_callback=lambda s, l: steps.append(l), run_meta={"config_hash": "x1"})
    assert len(steps) == 30 and np.all(np.isfinite(steps))
    assert hist[-1].train_loss < hist[0].train_loss
    assert {p.name for p in tmp_path.iterdir()} >= {"stage1_best.ckpt", "stage1_last.ckpt",
                                                     "history_stage1.csv"}
    assert read_header(tmp_path / "stage1_last.ckpt")["meta"]["config_hash"] == "x1"
    rows = list(csv.DictReader(open(tmp_path / "history_stage1.csv")))
    assert len(rows) == 15


def test_stage1_restores_best():
    feats = toy_features()
    ne = init_ne_net(TINY, seed=0)
    hist = train_stage1(ne, feats, TrainConfig(epochs_stage1=4, batch_size=4), TINY,
                        val=toy_features(seed=1))
    best = min(r.val_loss for r in hist)
    cfg = TrainConfig(batch_size=4)
    val = toy_features(seed=1)
    now = _evaluate(lambda idx: _stage1_loss(ne, val, idx, cfg, TINY), val, 4)
    assert now == pytest.approx(best, rel=1e-5)


def test_max_steps():
    ne = init_ne_net(TINY)
    hist = train_stage1(ne, toy_features(), TrainConfig(epochs_stage1=10, batch_size=1,
                                                        max_steps_stage1=6), TINY)
    assert hist[-1].steps == 6 and len(hist) == 2


def test_deterministic():
    def run():
        ne = init_ne_net(TINY, seed=2)
        train_stage1(ne, toy_features(), TrainConfig(epochs_stage1=2, batch_size=2), TINY)
        return ne
    a, b = run(), run()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_nan_input_diverges():
    feats = toy_features()
    feats.magX[0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        train_stage1(init_ne_net(TINY), feats, TrainConfig(epochs_stage1=1, batch_size=4),
                     TINY)


def test_stage2_reduces_re_loss(tmp_path):
    feats = toy_features()
    ne, re = init_ne_net(TINY, seed=0), init_re_net(TINY, seed=1)
    cfg = TrainConfig(epochs_stage2=20, batch_size=4, lr_re_stage2=1e-2)
    hist = train_stage2(ne, re, feats, cfg, TINY, out_dir=tmp_path)
    assert hist[-1].train_loss < hist[0].train_loss
    for name in ("stage2_ne_best.ckpt", "stage2_re_best.ckpt", "stage2_ne_last.ckpt",
                 "stage2_re_last.ckpt", "history_stage2.csv"):
        assert (tmp_path / name).exists()
    back, _ = load_checkpoint(tmp_path / "stage2_re_best.ckpt")
    assert set(back) == set(re)


def test_stage2_gradient_reaches_ne():
    feats = toy_features()
    ne, re = init_ne_net(TINY, seed=0), init_re_net(TINY, seed=1)
    # a nonzero head is needed for the regression loss to reach the masks
    re["re_net.head.weight"].data[:] = 0.1
    assert ne_gradient_norm(ne, re, feats, np.arange(2), TrainConfig(lam=0.0), TINY) > 0


def test_stage2_frozen_ne():
    feats = toy_features()
    ne, re = init_ne_net(TINY, seed=0), init_re_net(TINY, seed=1)
    before = {k: p.data.copy() for k, p in ne.items()}
    train_stage2(ne, re, feats, TrainConfig(epochs_stage2=2, lr_ne_stage2=0.0, batch_size=2),
                 TINY)
    assert all(np.array_equal(before[k], ne[k].data) for k in ne)
