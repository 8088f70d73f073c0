
from __future__ import annotations

import pytest

from pmp_dpp_lab.config import ExperimentConfig, ConfigError, OUTPUT_ENV, PRESETS, load_config


def test_presets_load_and_validate():
    for name in PRESETS:
        cfg = load_config(name)
        assert cfg.name == name
    cfg = load_config("lq1-smoke")
    assert cfg.scenario == "lq1"
    assert cfg.paths == 4000
    assert cfg.export_dir.endswith("lq1-smoke")


def test_overrides_win():
    cfg = load_config("bang-bang", {"seed": 3, "run_name": None})
    assert cfg.seed == 3
    assert cfg.name == "bang-bang-s3"


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as err:
        load_config("lq1-smoke", {"volatility": 0.3})
    assert err.value.key == "volatility"


def test_invalid_values_rejected():
    for bad in ({"scenario": "plasma-3"}, {"steps": 1}, {"paths": 5}, {"checks": ["pmp", "nope"]},
                {"tolerance_scale": 0.0}):
        with pytest.raises(ConfigError):
            load_config("lq1-smoke", bad)


def test_malformed_yaml_reports_position(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("scenario: lq1\n  steps: 3\n", encoding="utf-8")
    with pytest.raises(ConfigError) as err:
        load_config(str(path))
    assert err.value.line == 2
    assert err.value.column is not None
    assert "line 2" in str(err.value)


def test_non_mapping_yaml_rejected(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- lq1\n- heat-2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.yaml"))


def test_effective_config_round_trips(tmp_path):
    cfg = load_config("heat2-smoke", {"control_range": [-2.0, 2.0], "output_root": str(tmp_path)})
    path = tmp_path / "effective.yaml"
    cfg.dump(str(path))
    again = load_config(str(path))
    assert again.effective() == cfg.effective()
    assert again.control_range == (-2.0, 2.0)


def test_output_root_from_environment(monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/lab-runs")
    assert ExperimentConfig().output_root == "/tmp/lab-runs"
