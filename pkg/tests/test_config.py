import json

import pytest

from ms2s import config
from ms2s.errors import ConfigError


def test_defaults():
    cfg = config.resolve()
    assert cfg["seed"] == 0 and cfg["collar"] == 0.25 and cfg["dtype"] == "float32"


def test_precedence(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 3, "lr": 0.01, "epochs": 2}))
    env = {"MS2S_SEED": "5", "MS2S_LR": "0.02", "HOME": "/x"}
    cfg = config.resolve(f, {"seed": 7, "lr": None}, env)
    assert cfg["seed"] == 7  # flag beats env and file
    assert cfg["lr"] == 0.02  # env beats file; None flag is absent
    assert cfg["epochs"] == 2  # file beats default


def test_unknown_keys_rejected(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"learning_rate": 1}))
    with pytest.raises(ConfigError, match="learning_rate"):
        config.resolve(f)
    with pytest.raises(ConfigError, match="MS2S_BOGUS"):
        config.resolve(environ={"MS2S_BOGUS": "1"})
    with pytest.raises(ConfigError):
        config.resolve(flags={"nope": 1})


@pytest.mark.parametrize(
    "key,value", [("seed", "abc"), ("seed", 1.5), ("mixup", "maybe"), ("jobs", 0), ("dtype", "float16")]
)
def test_bad_values(key, value):
    with pytest.raises(ConfigError):
        config.resolve(flags={key: value})


def test_bool_strings():
    assert config.resolve(environ={"MS2S_MIXUP": "yes"})["mixup"] is True
    assert config.resolve(environ={"MS2S_MIXUP": "0"})["mixup"] is False


def test_bad_file(tmp_path):
    with pytest.raises(ConfigError):
        config.resolve(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        config.resolve(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError):
        config.resolve(tmp_path / "list.json")


def test_model_config_presets():
    cfg = config.resolve(flags={"preset": "desk", "n_max": 2, "d_model": 32, "seed": 4})
    m = config.model_config(cfg)
    assert (m.d_model, m.n_max, m.t_out, m.seed, m.n_feats) == (32, 2, 200, 4, 40)
    assert config.model_config({**cfg, "preset": "paper", "d_model": None}).d_model == 512
    with pytest.raises(ConfigError):
        config.model_config({**cfg, "preset": "huge"})


def test_sidecar(tmp_path):
    cfg = config.resolve(flags={"seed": 2})
    p = config.write_sidecar(tmp_path, cfg, "train")
    data = json.loads(p.read_text())
    assert p.name == "train.config.json" and data["seed"] == 2 and data["command"] == "train"
