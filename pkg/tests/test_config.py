from dataclasses import dataclass

import pytest

from idtrack.config import build_dataclass, format_flat_config, parse_flat_config, read_flat_config, split_config
from idtrack.errors import ConfigError
from idtrack.scene import SceneConfig
from idtrack.training import TrainConfig


def test_parse_with_comments():
    text = "# header\nT = 19  # window\n\ninterval_range = 1, 4\nlambda_occ=0.5\n"
    assert parse_flat_config(text) == {"T": "19", "interval_range": "1, 4", "lambda_occ": "0.5"}


def test_parse_errors():
    with pytest.raises(ConfigError):
        parse_flat_config("no equals sign here")
    with pytest.raises(ConfigError):
        parse_flat_config(" = 3")


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError) as err:
        read_flat_config(tmp_path / "nope.cfg")
    assert "nope.cfg" in str(err.value)


def test_coercion():
    cfg = build_dataclass(TrainConfig, {"T": "5", "interval_range": "2,3", "lr_drop_epochs": "3, 7", "supervise_newborns": "false"})
    assert cfg.T == 5 and cfg.interval_range == (2, 3) and cfg.lr_drop_epochs == (3, 7)
    assert cfg.supervise_newborns is False
    scene = build_dataclass(SceneConfig, {"arena_size": "100, 50"})
    assert scene.arena_size == (100.0, 50.0)


def test_bad_values():
    with pytest.raises(ConfigError):
        build_dataclass(TrainConfig, {"T": "abc"})
    with pytest.raises(ConfigError):
        build_dataclass(TrainConfig, {"supervise_newborns": "maybe"})
    with pytest.raises(ConfigError):
        build_dataclass(TrainConfig, {"interval_range": "1,2,3"})
    with pytest.raises(ConfigError):
        build_dataclass(TrainConfig, {"bogus": "1"})


def test_optional_field():
    @dataclass
    class C:
        x: int | None = 3

    assert build_dataclass(C, {"x": "none"}).x is None
    assert build_dataclass(C, {"x": "4"}).x == 4


def test_format_parses_back():
    values = {"a": 1, "b": (1, 2), "c": True, "d": 0.25}
    assert parse_flat_config(format_flat_config(values)) == {"a": "1", "b": "1, 2", "c": "true", "d": "0.25"}


def test_split():
    a, b = split_config({"T": "3", "num_frames": "10", "seed": "4"}, TrainConfig, SceneConfig)
    assert a == {"T": "3", "seed": "4"} and b == {"num_frames": "10", "seed": "4"}
    with pytest.raises(ConfigError):
        split_config({"nope": "1"}, TrainConfig)
