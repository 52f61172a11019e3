import csv
import json

import numpy as np
import pytest
from scipy.signal import fftconvolve

from reverb_t60.cli import file_sha256, main
from reverb_t60.dsp import SampleBuffer, read_wav, write_wav

CONFIG = """
[rirs]
rooms = [[4.0, 3.5, 2.8]]
targets = [0.35, 0.7]
distances = [1.0]
angles = [0]

[dataset]
duration = 1.0
snrs = [0, 20]

[model]
preset = "tiny"

[train]
epochs_stage1 = 1
epochs_stage2 = 1
batch_size = 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(CONFIG)
    common = ["--config", str(cfg), "--log-level", "WARNING"]
    assert main(["gen-rirs", *common, "--out-dir", str(root / "rirs")]) == 0
    assert main(["synth-data", *common, "--rir-dir", str(root / "rirs"),
                 "--out-dir", str(root / "train")]) == 0
    assert main(["train", *common, "--data-dir", str(root / "train"),
                 "--out-dir", str(root / "model")]) == 0
    rng = np.random.default_rng(1)
    wav = root / "eight.wav"
    write_wav(wav, SampleBuffer(0.05 * rng.standard_normal(8 * 16000), 16000))
    return root, common


def test_gen_rirs_outputs(pipeline):
    root, _ = pipeline
    rows = list(csv.DictReader(open(root / "rirs" / "summary.csv")))
    assert len(rows) == 2
    run = json.loads((root / "rirs" / "run.json").read_text())
    assert run["command"] == "gen-rirs" and len(run["config_hash"]) == 16
    side = json.loads((root / "rirs" / f"{rows[0]['id']}.json").read_text())
    assert side["config_hash"] == run["config_hash"] and side["kind"] == "simulated"


def test_gen_rirs_deterministic(pipeline, tmp_path):
    root, common = pipeline
    assert main(["gen-rirs", *common, "--out-dir", str(tmp_path)]) == 0
    for wav in (root / "rirs").glob("*.wav"):
        assert file_sha256(wav) == file_sha256(tmp_path / wav.name)


def test_synth_manifest(pipeline):
    root, _ = pipeline
    manifest = json.loads((root / "train" / "manifest.json").read_text())
    assert len(manifest["config_hash"]) == 16


def test_train_artifacts(pipeline):
    root, _ = pipeline
    for name in ("bundle/ne.ckpt", "bundle/re.ckpt", "bundle/bundle.json",
                 "stage1_best.ckpt", "history_stage2.csv", "run.json"):
        assert (root / "model" / name).exists(), name


def test_estimate(pipeline, tmp_path, capsys):
    root, common = pipeline
    wav = tmp_path / "four.wav"
    write_wav(wav, SampleBuffer(read_wav(root / "eight.wav").samples[:64000], 16000))
    capsys.readouterr()
    assert main(["estimate", *common, "--model", str(root / "model" / "bundle"), str(wav)]) == 0
    assert float(capsys.readouterr().out) >= 0
    assert main(["estimate", *common, "--model", str(root / "model" / "bundle"), str(wav),
                 "--per-frame", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["per_frame"]) == 399 and doc["per_frame"][-1] == pytest.approx(doc["t60_s"])


def test_sweep_duration(pipeline, tmp_path):
    root, common = pipeline
    out = tmp_path / "sweep.csv"
    assert main(["sweep-duration", *common, "--model", str(root / "model" / "bundle"),
                 str(root / "eight.wav"), "--out", str(out), "--mode", "full"]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["duration_s", "t60_estimate_s"] and len(rows) == 41


def test_eval_and_report(pipeline, tmp_path):
    root, common = pipeline
    out = tmp_path / "eval"
    assert main(["eval", *common, "--model", str(root / "model" / "bundle"),
                 "--data-dir", str(root / "train"), "--out-dir", str(out),
                 "--condition", "seen"]) == 0
    for name in ("estimates.csv", "report.csv", "report.json", "errors_by_snr.dat", "run.json"):
        assert (out / name).exists()
    assert main(["report", *common, str(out / "estimates.csv"), "--out-dir",
                 str(tmp_path / "rep")]) == 0
    first = (out / "report.csv").read_text()
    assert (tmp_path / "rep" / "report.csv").read_text() == first


def test_measure_loop_back(tmp_path, capsys):
    sr, t60 = 16000, 0.5
    rng = np.random.default_rng(3)
    t = np.arange(int(0.8 * sr)) / sr
    rir = rng.standard_normal(t.size) * 10 ** (-3 * t / t60)
    rir[0] = 5.0
    sweep_path = tmp_path / "sweep.wav"
    ess = ["--f-start", "50", "--f-end", "7000", "--duration", "3", "--sample-rate", str(sr)]
    assert main(["measure", "--write-sweep", str(sweep_path), *ess]) == 0
    sweep = read_wav(sweep_path)
    rec = tmp_path / "rec.wav"
    write_wav(rec, SampleBuffer(fftconvolve(sweep.samples, rir), sr))
    capsys.readouterr()
    assert main(["measure", str(sweep_path), str(rec), *ess, "--json",
                 "--out", str(tmp_path / "rir.wav")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["t60_s"] == pytest.approx(t60, rel=0.05)
    assert (tmp_path / "rir.wav").exists()


class TestExitCodes:
    def test_bad_config(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nwarp = 9\n")
        assert main(["gen-rirs", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2

    def test_missing_audio(self, pipeline, tmp_path):
        root, common = pipeline
        assert main(["estimate", *common, "--model", str(root / "model" / "bundle"),
                     str(tmp_path / "none.wav")]) == 3

    def test_not_a_bundle(self, tmp_path):
        assert main(["estimate", "--model", str(tmp_path), str(tmp_path / "x.wav")]) == 3

    def test_measure_needs_inputs(self):
        assert main(["measure"]) == 2

    def test_stage2_without_checkpoint(self, pipeline, tmp_path):
        root, common = pipeline
        assert main(["train", *common, "--data-dir", str(root / "train"), "--stage", "2",
                     "--out-dir", str(tmp_path)]) == 3

    def test_divergence(self, pipeline, tmp_path):
        root, _ = pipeline
        cfg = tmp_path / "hot.toml"
        cfg.write_text(CONFIG.replace("epochs_stage1 = 1", "epochs_stage1 = 3\nlr_stage1 = 1e30"))
        assert main(["train", "--config", str(cfg), "--data-dir", str(root / "train"),
                     "--stage", "1", "--out-dir", str(tmp_path / "m")]) == 4

    def test_env_out_dir(self, pipeline, tmp_path, monkeypatch):
        root, common = pipeline
        monkeypatch.setenv("REVERB_T60_OUT_DIR", str(tmp_path))
        assert main(["report", *common, str(root / "none.csv")]) == 3
        assert (tmp_path / "report").is_dir()
