import json

import pytest

from gemfuse.config import PRESETS, RunConfig, load_config
from gemfuse.errors import ConfigError


def write(tmp_path, doc):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


def test_defaults_are_the_toy_setup():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.train.lr == 1e-3 and cfg.train.batch_size == 16
    assert cfg.data.n_train == 400 and cfg.data.n_test == 100 and cfg.data.scene.image_size == 64


def test_large_scale_preset_is_opt_in():
    big = load_config(preset="paper-config")
    assert big.train.lr == 8e-6 and big.train.batch_size == 2 and big.train.epochs == 100
    assert load_config().train.lr != big.train.lr


def test_file_then_flags(tmp_path):
    path = write(tmp_path, {"mode": "mc", "train": {"lr": 0.01, "epochs": 3}})
    cfg = load_config(path)
    assert cfg.mode == "mc" and cfg.train.lr == 0.01 and cfg.train.epochs == 3
    assert cfg.train.batch_size == 16
    cfg = load_config(path, overrides={"train.lr": 0.5})
    assert cfg.train.lr == 0.5 and cfg.train.epochs == 3


def test_lists_become_tuples(tmp_path):
    cfg = load_config(write(tmp_path, {"data": {"scene": {"object_count": [0, 2]}}, "rsh": {"radius": [0.1, 0.2]}}))
    assert cfg.data.scene.object_count == (0, 2)
    assert cfg.rsh.radius == (0.1, 0.2)


@pytest.mark.parametrize(
    "doc, key",
    [
        ({"modes": "sa"}, "modes"),
        ({"train": {"learning_rate": 1}}, "train.learning_rate"),
        ({"data": {"scene": {"colour": 1}}}, "data.scene.colour"),
    ],
)
def test_unknown_keys_named(tmp_path, doc, key):
    with pytest.raises(ConfigError, match=f"'{key}'"):
        load_config(write(tmp_path, doc))


@pytest.mark.parametrize(
    "override, key",
    [
        ({"mode": "entropy"}, "mode"),
        ({"k": 0}, "k"),
        ({"k": 33}, "k"),
        ({"tau": 0.0}, "tau"),
        ({"train.lr": -1.0}, "train.lr"),
        ({"train.batch_size": 0}, "train.batch_size"),
        ({"train.optimizer": "rmsprop"}, "train.optimizer"),
        ({"train.corruption": {"rsh": 0.7, "blank": 0.5}}, "train.corruption"),
        ({"train.corruption": {"fog": 0.1}}, "train.corruption"),
        ({"eval.trials": 0}, "eval.trials"),
        ({"eval.corruption": "snow"}, "eval.corruption"),
        ({"preprocess.alpha": 1.5}, "preprocess.alpha"),
        ({"train.epochs": "ten"}, "train.epochs"),
        ({"data.scene.object_count": [3, 1]}, "data.scene"),
        ({"rsh.shadow_factor": [0.5, 1.5]}, "rsh"),
    ],
)
def test_invalid_values_named(override, key):
    with pytest.raises(ConfigError, match=f"'{key}'"):
        load_config(overrides=override)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{mode: sa")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config(bad)
    with pytest.raises(ConfigError, match="preset"):
        load_config(preset="huge")


def test_all_presets_validate():
    for name in PRESETS:
        load_config(preset=name)


def test_checkpoint_dir_default():
    assert str(load_config(overrides={"mode": "sf", "output_dir": "out"}).checkpoint_dir()) == "out/sf/checkpoint"
