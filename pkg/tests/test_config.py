import json
from pathlib import Path

import pytest

from config import DEFAULT_CONFIG, ExperimentName, deep_merge, load_config, save_config, validate_config
from errors import ConfigError
from transport import PLAN_CAP

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(path: Path, text: str) -> str:
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_defaults_when_default_file_missing(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = load_config()
    assert cfg.experiment == ExperimentName.TRACE_AUDIT
    assert cfg.model.a == DEFAULT_CONFIG["model"]["a"]


def test_corrupt_default_file_falls_back(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write(tmp_path / "config.json", "{not json")
    assert load_config().experiment == ExperimentName.TRACE_AUDIT


def test_explicit_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.json"))


def test_parse_error_reports_position(tmp_path):
    path = write(tmp_path / "bad.json", '{\n  "experiment": "trace_audit",\n  "model": {"a": }\n}\n')
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_unknown_key_is_rejected(tmp_path):
    path = write(tmp_path / "extra.json", json.dumps({"model": {"a": 0.1, "beta": 2.0}}))
    with pytest.raises(ConfigError, match=r"model\.beta"):
        load_config(path)


def test_range_violation_names_key():
    with pytest.raises(ConfigError, match=r"model\.a"):
        validate_config({"model": {"a": -1.0}})


def test_unknown_experiment():
    with pytest.raises(ConfigError, match="experiment"):
        validate_config({"experiment": "spectral_gap"})


def test_top_level_must_be_object(tmp_path):
    path = write(tmp_path / "list.json", "[1, 2]")
    with pytest.raises(ConfigError, match="object"):
        load_config(path)


def test_n_values_must_increase():
    with pytest.raises(ConfigError, match=r"chaos\.n_values"):
        validate_config({"chaos": {"n_values": [64, 16]}})


def test_deep_merge_keeps_siblings():
    merged = deep_merge({"a": {"x": 1, "y": 2}, "b": [1]}, {"a": {"y": 3}, "b": [2, 3]})
    assert merged == {"a": {"x": 1, "y": 3}, "b": [2, 3]}


def test_deep_merge_does_not_alias_base():
    base = {"a": {"x": [1]}}
    merged = deep_merge(base, {})
    merged["a"]["x"].append(2)
    assert base == {"a": {"x": [1]}}


def test_partial_section_is_merged():
    cfg = validate_config({"model": {"eps": 0.02}})
    assert cfg.model.eps == 0.02
    assert cfg.model.a == DEFAULT_CONFIG["model"]["a"]


def test_plan_cap_default_matches_transport():
    cfg = validate_config({})
    assert cfg.prop23.plan_cap == PLAN_CAP == 1_000_000
    assert cfg.sim.n_replicas**2 <= cfg.prop23.plan_cap


def test_sections_build_domain_objects():
    cfg = validate_config({"model": {"a": 0.2, "eps": 0.05, "dim": 2}, "sim": {"dt": 0.01, "n_replicas": 3}})
    params = cfg.model.params()
    assert (params.a, params.eps, params.dim) == (0.2, 0.05, 2)
    sim = cfg.sim.sim_config()
    assert sim.dt == 0.01 and sim.n_replicas == 3


def test_saved_config_reloads(tmp_path):
    cfg = validate_config({"experiment": "wj_audit", "model": {"a": 0.001, "eps": 0.0001}})
    save_config(cfg, tmp_path / "effective.json")
    assert load_config(str(tmp_path / "effective.json")) == cfg


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_config(str(path))
    assert cfg.experiment.value == path.stem
