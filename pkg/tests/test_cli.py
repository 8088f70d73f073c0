
from __future__ import annotations
import json
import os

import pytest

from pmp_dpp_lab.cli import main

RUN_DIR = "bang-bang"


@pytest.fixture(scope="module")
def bang_bang_runs(tmp_path_factory):
    """Two runs of the bang-bang preset into separate output roots."""
    roots, codes = [], []
    for label in ("first", "second"):
        root = tmp_path_factory.mktemp(label)
        codes.append(main(["run", "bang-bang", "--output", str(root)]))
        roots.append(os.path.join(str(root), RUN_DIR))
    return roots, codes


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    assert "lq1" in out
    assert "presets:" in out


def test_malformed_config_exits_with_config_code(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("scenario: lq1\n  steps: 3\n", encoding="utf-8")
    assert main(["run", str(path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_bad_overrides_exit_with_config_code(tmp_path):
    assert main(["run", "lq1-smoke", "--set", "volatility=1", "--output", str(tmp_path)]) == 2
    assert main(["run", "lq1-smoke", "--set", "steps", "--output", str(tmp_path)]) == 2


def test_bang_bang_preset_passes(bang_bang_runs):
    roots, codes = bang_bang_runs
    assert codes == [0, 0]
    with open(os.path.join(roots[0], "report.json"), encoding="utf-8") as f:
        report = json.load(f)
    assert sorted(c["name"] for c in report["checks"]) == ["dpp", "value_regularity"]
    assert report["errors"] == []


def test_runs_are_byte_identical(bang_bang_runs):
    roots, _ = bang_bang_runs
    csvs = sorted(n for n in os.listdir(roots[0]) if n.endswith(".csv"))
    assert "bang-bang_s0_checks.csv" in csvs
    assert csvs == sorted(n for n in os.listdir(roots[1]) if n.endswith(".csv"))
    for name in csvs:
        with open(os.path.join(roots[0], name), "rb") as a, open(os.path.join(roots[1], name), "rb") as b:
            assert a.read() == b.read(), name


def test_manifest_lists_artifacts(bang_bang_runs):
    roots, _ = bang_bang_runs
    with open(os.path.join(roots[0], "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    kinds = {e["kind"] for e in manifest["artifacts"]}
    assert {"config", "value_field", "trajectories", "checks", "report"} <= kinds


def test_report_command(bang_bang_runs, capsys):
    roots, _ = bang_bang_runs
    path = os.path.join(roots[0], "report.json")
    assert main(["report", path]) == 0
    assert "Run Summary (bang-bang)" in capsys.readouterr().out
    assert main(["report", path, "--csv"]) == 0
    assert capsys.readouterr().out.startswith("name,status,margin,tolerance,runtime,seed")


def test_lq1_smoke_preset_passes(tmp_path):
    assert main(["run", "lq1-smoke", "--output", str(tmp_path)]) == 0
    with open(os.path.join(str(tmp_path), "lq1-smoke", "report.json"), encoding="utf-8") as f:
        report = json.load(f)
    assert sorted(c["name"] for c in report["checks"]) == ["pmp", "smooth_relations", "superdiff_inclusions",
                                                           "time_inclusion", "value_regularity"]
    assert all(c["status"] != "fail" for c in report["checks"])
    assert report["errors"] == []
