import json

import pytest

from crosskd.config import RunConfig, from_flat, load_config, parse_override, set_key, to_flat
from crosskd.errors import ConfigError


def test_flat_round_trip():
    cfg = RunConfig()
    cfg.kd.temperature = 2.5
    cfg.student.blocks[0][1] = 12
    back = from_flat(to_flat(cfg))
    assert back == cfg
    assert json.loads(json.dumps(to_flat(cfg))) == to_flat(cfg)


def test_flat_keys_cover_every_section():
    keys = to_flat(RunConfig())
    for key in ("seed", "kd.temperature", "cv.folds", "teacher.qkv_block", "imbalance.mode", "pretrain.epochs"):
        assert key in keys


def test_from_flat_does_not_mutate_base():
    base = RunConfig()
    from_flat({"kd.mask_p": 0.9}, base)
    assert base.kd.mask_p == 0.5


@pytest.mark.parametrize(
    "text,expected",
    [("kd.temperature=2", ("kd.temperature", 2)), ("imbalance.mode=wrs", ("imbalance.mode", "wrs")),
     ("data.counts=[1,2]", ("data.counts", [1, 2])), ("cv.teacher_checkpoint=null", ("cv.teacher_checkpoint", None))],
)
def test_parse_override(text, expected):
    assert parse_override(text) == expected


def test_parse_override_needs_equals():
    with pytest.raises(ConfigError):
        parse_override("kd.temperature")


def test_coercion():
    cfg = RunConfig()
    set_key(cfg, "kd.temperature", 2)
    assert isinstance(cfg.kd.temperature, float)
    set_key(cfg, "cv.folds", 3.0)
    assert cfg.cv.folds == 3 and isinstance(cfg.cv.folds, int)
    for key, value in (("cv.folds", 2.5), ("report.measure_latency", 1), ("kd.temperature", "hot")):
        with pytest.raises(ConfigError):
            set_key(cfg, key, value)


@pytest.mark.parametrize("key", ["kd.nope", "nope.temperature", "kd", "seed.x"])
def test_unknown_keys(key):
    with pytest.raises(ConfigError):
        set_key(RunConfig(), key, 1)


@pytest.mark.parametrize(
    "override",
    ["cv.folds=1", "student_train.warmup=40", "student_train.patience=0", "kd.lambda_source=magic",
     "kd.components=[\"ce\",\"x\"]", "kd.components=[]", "imbalance.mode=smote", "kd.mask_p=1.5",
     "cv.teacher_mode=checkpoint", "teacher.qkv_block=5", "student.truncation_index=9", "kd.lambdas=[1,2]"],
)
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 7, "kd.temperature": 1.0}))
    cfg = load_config(path, ["seed=8"])
    assert cfg.seed == 8 and cfg.kd.temperature == 1.0


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(bad)
