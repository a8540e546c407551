import json
import os

import pytest

from services.config_service import (
    apply_overrides,
    build_run_config,
    config_digest,
    load_run_config,
    validate_config,
)
from services.errors import ConfigurationError


def discover_config(**extra):
    raw = {
        "mode": "discover",
        "seed": 3,
        "kernel": {"family": "matern", "theta": [1.0], "nu": [2.5]},
        "operator": {"terms": [{"kind": "fractional_laplacian", "alpha": 1.0, "coeff": 0.5}]},
        "data": {"synth": {"recipe": "fracpoisson-1d"}},
    }
    raw.update(extra)
    return raw

# ---------- validate_config ----------

def test_valid_config():
    ok, msg = validate_config(discover_config())
    assert ok
    assert msg == "Config is valid."

def test_shipped_configs_are_valid(configs_dir):
    names = sorted(os.listdir(configs_dir))
    assert names
    for name in names:
        with open(os.path.join(configs_dir, name), encoding="utf-8") as handle:
            ok, msg = validate_config(json.load(handle))
        assert ok, f"{name}: {msg}"

def test_non_object_config():
    ok, msg = validate_config([1, 2])
    assert not ok
    assert "JSON object" in msg

def test_unknown_key_is_reported_with_path():
    raw = discover_config()
    raw["kernel"]["lengthscale"] = 2.0
    ok, msg = validate_config(raw)
    assert not ok
    assert "kernel.lengthscale: unknown key" in msg

def test_unknown_key_inside_term():
    raw = discover_config()
    raw["operator"]["terms"][0]["order"] = 1.0
    ok, msg = validate_config(raw)
    assert not ok
    assert "operator.terms[0].order: unknown key" in msg

def test_unknown_mode():
    ok, msg = validate_config(discover_config(mode="fit"))
    assert not ok
    assert "mode: must be one of" in msg

def test_wrong_types_and_ranges():
    raw = discover_config(seed="3", threads=0)
    raw["operator"]["terms"][0]["alpha"] = -1.0
    ok, msg = validate_config(raw)
    assert not ok
    assert "seed: expected integer, got str" in msg
    assert "threads: must be at least 1" in msg
    assert "operator.terms[0].alpha: must be positive" in msg

def test_boolean_is_not_a_number():
    ok, msg = validate_config(discover_config(seed=True))
    assert not ok
    assert "seed: expected integer, got boolean" in msg

def test_missing_section_for_mode():
    raw = discover_config()
    del raw["operator"]
    ok, msg = validate_config(raw)
    assert not ok
    assert "operator: required for mode discover" in msg

def test_data_needs_both_csvs_or_synth():
    ok, msg = validate_config(discover_config(data={"csv_a": "u.csv"}))
    assert not ok
    assert "give either csv_a and csv_b, or synth" in msg
    ok, _ = validate_config(discover_config(data={"csv_a": "u.csv", "csv_b": "f.csv"}))
    assert ok

def test_evolution_csvs_need_time_step():
    raw = discover_config(mode="discover-evolution", data={"csv_a": "n.csv", "csv_b": "nm1.csv"})
    ok, msg = validate_config(raw)
    assert not ok
    assert "data.dt: required" in msg

def test_series_needs_exactly_one_source():
    raw = {
        "mode": "calibrate-stable",
        "kernel": {"family": "matern"},
        "stable": {"alpha": 1.5, "p": 0.5, "gamma": 1.0},
        "series": {"csv": "s.csv", "synth": {"recipe": "stable-path"}},
    }
    ok, msg = validate_config(raw)
    assert not ok
    assert "exactly one of csv or synth" in msg

def test_stable_initial_values_must_be_interior():
    raw = {
        "mode": "calibrate-stable",
        "kernel": {"family": "matern"},
        "stable": {"alpha": 2.0, "p": 0.5, "gamma": 1.0},
        "series": {"csv": "s.csv"},
    }
    ok, msg = validate_config(raw)
    assert not ok
    assert "initial alpha" in msg

# ---------- digest and RunConfig ----------

def test_digest_ignores_key_order():
    first = {"mode": "synth", "synth": {"recipe": "stable-path", "steps": 10}}
    second = {"synth": {"steps": 10, "recipe": "stable-path"}, "mode": "synth"}
    assert config_digest(first) == config_digest(second)
    assert config_digest(first) != config_digest({**first, "seed": 1})
    assert len(config_digest(first)) == 64

def test_run_config_defaults(tmp_path):
    config = build_run_config({"mode": "synth", "synth": {"recipe": "stable-path"}}, tmp_path)
    assert config.mode == "synth"
    assert config.seed == 0
    assert config.threads == 1
    assert config.output_dir == "synth"
    assert config.section("kernel") == {}
    assert config.resolve("data/u.csv") == tmp_path / "data" / "u.csv"

def test_build_rejects_invalid_config():
    with pytest.raises(ConfigurationError) as info:
        build_run_config({"mode": "synth"})
    assert "synth: required" in str(info.value)

def test_load_run_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(discover_config()), encoding="utf-8")
    config = load_run_config(path)
    assert config.base_dir == tmp_path
    assert config.digest == config_digest(discover_config())

def test_load_missing_or_malformed_config(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_run_config(broken)

def test_overrides_take_precedence_and_change_digest():
    config = build_run_config(discover_config())
    updated = apply_overrides(config, out="elsewhere", seed=9, quad_1d=32, quad_2d=(16, 24), threads=2)
    assert updated.output_dir == "elsewhere"
    assert updated.seed == 9
    assert updated.threads == 2
    assert updated.section("quadrature") == {"nodes_1d": 32, "radial": 16, "angular": 24}
    assert updated.digest != config.digest
    assert "quadrature" not in config.raw

def test_overrides_are_validated():
    config = build_run_config(discover_config())
    with pytest.raises(ConfigurationError):
        apply_overrides(config, quad_2d=(16, 2))

def test_no_overrides_keeps_digest():
    config = build_run_config(discover_config())
    assert apply_overrides(config).digest == config.digest
