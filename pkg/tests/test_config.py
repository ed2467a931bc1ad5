import json
import os

import pytest

from tprd3.config import (RunConfig, config_dict, manifest_json, parse_config,
                          parse_overrides)
from tprd3.errors import ConfigError


def test_defaults():
    cfg = parse_config()
    assert cfg.v == 20 and cfg.iterations == 3000 and cfg.batch == 64
    assert cfg.variant == "fwm-d3-woF"
    assert cfg.d_query == cfg.d_code // 2  # derived when left at 0
    assert cfg.flag_mode == "constant"


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config(overrides={"not_a_field": "3"})


def test_type_conversion_and_bools():
    cfg = parse_config(overrides={"lr": "0.5", "use_codebook": "false", "v": "8",
                                  "episode_len": "8"})
    assert cfg.lr == 0.5 and cfg.use_codebook is False and cfg.v == 8
    with pytest.raises(ConfigError):
        parse_config(overrides={"use_codebook": "maybe"})
    with pytest.raises(ConfigError):
        parse_config(overrides={"v": "2.5"})


def test_key_value_file_with_comments(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nv = 10\nepisode_len=10  # trailing\n\nseed=7\n")
    cfg = parse_config(path=str(p))
    assert (cfg.v, cfg.episode_len, cfg.seed) == (10, 10, 7)


def test_bad_file_line_reports_location(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("v=10\njust a line\n")
    with pytest.raises(ConfigError, match=r"run\.cfg:2"):
        parse_config(path=str(p))


def test_manifest_round_trip(tmp_path):
    cfg = parse_config(overrides={"seed": "42", "top_k": "4", "p_dropout": "0.25",
                                  "use_residual": "false", "out_dir": "elsewhere"})
    p = tmp_path / "manifest.json"
    p.write_text(manifest_json(cfg))
    cfg2 = parse_config(path=str(p))
    assert cfg2 == cfg


def test_manifest_serializes_every_field():
    cfg = RunConfig()
    recorded = set(json.loads(manifest_json(cfg)))
    from dataclasses import fields
    assert recorded == {f.name for f in fields(RunConfig)}


def test_precedence_file_then_overrides_then_env_then_seed(tmp_path, monkeypatch):
    p = tmp_path / "run.cfg"
    p.write_text("seed=1\nv=10\nepisode_len=5\n")
    assert parse_config(path=str(p)).seed == 1
    assert parse_config(path=str(p), overrides={"seed": "2"}).seed == 2
    monkeypatch.setenv("TPRD3_SEED", "3")
    assert parse_config(path=str(p), overrides={"seed": "2"}).seed == 3
    assert parse_config(path=str(p), overrides={"seed": "2"}, seed=4).seed == 4
    # non-seed fields unaffected by the env knob
    assert parse_config(path=str(p), seed=4).v == 10


def test_bad_env_seed(monkeypatch):
    monkeypatch.setenv("TPRD3_SEED", "not-an-int")
    with pytest.raises(ConfigError, match="TPRD3_SEED"):
        parse_config()


def test_d_query_derivation_rejects_odd_d_code():
    with pytest.raises(ConfigError, match="odd"):
        parse_config(overrides={"d_code": "9"})
    cfg = parse_config(overrides={"d_code": "9", "d_query": "5"})
    assert cfg.d_query == 5


def test_validation_errors():
    with pytest.raises(ConfigError):
        parse_config(overrides={"top_k": "100"})  # > n_code
    with pytest.raises(ConfigError):
        parse_config(overrides={"episode_len": "21"})  # > v
    with pytest.raises(ConfigError):
        parse_config(overrides={"variant": "transformer"})
    with pytest.raises(ConfigError):
        parse_config(overrides={"use_codebook": "false", "use_residual": "false"})
    with pytest.raises(ConfigError):
        parse_config(overrides={"p_dropout": "1.0"})
    with pytest.raises(ConfigError):
        parse_config(overrides={"flag_mode": "never"})
    with pytest.raises(ConfigError):
        parse_config(overrides={"lr": "0"})


def test_parse_overrides():
    assert parse_overrides(["a=1", "b=x=y"]) == {"a": "1", "b": "x=y"}
    with pytest.raises(ConfigError):
        parse_overrides(["missing-equals"])


def test_manifest_is_sorted_and_newline_terminated():
    text = manifest_json(RunConfig())
    assert text.endswith("\n")
    keys = list(json.loads(text))
    assert keys == sorted(keys)
    assert json.loads(text) == config_dict(RunConfig())
