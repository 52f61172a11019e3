import pytest

from reverb_t60.config import EvalConfig, RunConfig
from reverb_t60.exceptions import ConfigurationError


def write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.eval.snrs == (0.0, 5.0, 10.0, 15.0, 20.0)
    assert cfg.model.preset == "desk"


def test_toml(tmp_path):
    cfg = RunConfig.from_toml(write(tmp_path, """
[run]
jobs = 2
[model]
preset = "tiny"
[train]
batch_size = 4
[rirs]
targets = [0.4, 0.8]
"""))
    assert cfg.run.jobs == 2 and cfg.train.batch_size == 4
    assert cfg.model.ne_width == 2 and cfg.rirs.targets == (0.4, 0.8)


@pytest.mark.parametrize("text", ["[trian]\nbatch_size = 4\n", "[train]\nbatchsize = 4\n",
                                  "[model]\npreset = 'giant'\n", "[run]\njobs = 0\n",
                                  "not toml = = 1"])
def test_rejects(tmp_path, text):
    with pytest.raises(ConfigurationError):
        RunConfig.from_toml(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig.from_toml(tmp_path / "nope.toml")


def test_hash_ignores_run_section():
    a = RunConfig()
    assert a.hash() == a.override("run", jobs=4, out_dir="elsewhere").hash()
    assert a.hash() != a.override("train", batch_size=2).hash()
    assert len(a.hash()) == 16


def test_hash_includes_defaults(tmp_path):
    explicit = RunConfig.from_toml(write(tmp_path, "[train]\nbatch_size = 8\n"))
    assert explicit.hash() == RunConfig().hash()


def test_override():
    cfg = RunConfig().override("model", preset="tiny")
    assert cfg.model.ne_width == 2
    assert RunConfig().override("train", seed=None) == RunConfig()
    with pytest.raises(ConfigurationError):
        RunConfig().override("train", nonsense=1)


def test_eval_validation():
    with pytest.raises(ConfigurationError):
        EvalConfig(sweep_step=0)
