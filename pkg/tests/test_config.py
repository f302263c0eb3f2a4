import pytest

from mcc.config import ConfigError, format_config, load_configs, parse_config_text
from mcc.model import ModelConfig
from mcc.train import TrainConfig


def _write(tmp_path, text):
    path = tmp_path / "c.cfg"
    path.write_text(text)
    return path


def test_roundtrip(tmp_path):
    m = ModelConfig.paper(use_rgb=False, conditioning="global")
    t = TrainConfig(lr=3e-4, mode="scene", rotate=False)
    assert load_configs(_write(tmp_path, format_config(m, t)), ModelConfig, TrainConfig) == (m, t)


def test_parse_comments_and_errors():
    assert parse_config_text("a = 1  # note\n\n# full line\nb=x y\n") == {"a": "1", "b": "x y"}
    with pytest.raises(ConfigError, match=":2: duplicate key 'a'"):
        parse_config_text("a = 1\na = 2\n", "f.cfg")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config_text("just words\n", "f.cfg")


def test_missing_key_is_named(tmp_path):
    text = "\n".join(l for l in format_config(ModelConfig(), TrainConfig()).splitlines()
                     if not l.startswith("tau "))
    with pytest.raises(ConfigError, match="missing config key 'tau'"):
        load_configs(_write(tmp_path, text), ModelConfig, TrainConfig)


def test_unknown_key_rejected(tmp_path):
    text = format_config(ModelConfig(), TrainConfig()) + "dropout = 0.1\n"
    with pytest.raises(ConfigError, match="'dropout'"):
        load_configs(_write(tmp_path, text), ModelConfig, TrainConfig)


def test_bad_values(tmp_path):
    base = format_config(ModelConfig(), TrainConfig())
    with pytest.raises(ConfigError, match="enc_dim"):
        load_configs(_write(tmp_path, base.replace("enc_dim = 64", "enc_dim = wide")), ModelConfig, TrainConfig)
    with pytest.raises(ConfigError, match="use_rgb"):
        load_configs(_write(tmp_path, base.replace("use_rgb = true", "use_rgb = maybe")), ModelConfig, TrainConfig)
    with pytest.raises(ConfigError, match="patch_size"):
        load_configs(_write(tmp_path, base.replace("patch_size = 8", "patch_size = 7")), ModelConfig, TrainConfig)
