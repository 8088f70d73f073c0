
from __future__ import annotations

import numpy as np
import pytest

from pmp_dpp_lab.report import CheckResult, VerificationReport, status_of


def _report() -> VerificationReport:
    rep = VerificationReport("unit", seed=4)
    rep.add_step("Scenario built", {"dim": 1})
    rep.add_check(CheckResult("value_regularity", "pass", 0.9, 1.2, seed=7))
    rep.add_check(CheckResult("dpp", "inconclusive", 0.01, 0.02, seed=8,
                              witness={"t": np.float64(0.5), "offset": np.array([0.1])}))
    return rep


def test_status_of():
    assert status_of(True) == "pass"
    assert status_of(False) == "fail"
    assert status_of(True, inconclusive=True) == "inconclusive"


def test_unknown_status_rejected():
    with pytest.raises(ValueError):
        CheckResult("pmp", "ok", 0.0, 0.0)


def test_checks_are_kept_sorted_by_name():
    rep = _report()
    assert [c.name for c in rep.checks] == ["dpp", "value_regularity"]
    assert rep.counts() == {"pass": 1, "fail": 0, "inconclusive": 1}


def test_exit_code_reflects_failures_and_errors():
    rep = _report()
    assert rep.exit_code() == 0
    rep.add_check(CheckResult("pmp", "fail", -1.0, 0.1))
    assert rep.exit_code() == 1
    clean = _report()
    clean.add_error("compute_value", RuntimeError("boom"))
    assert clean.exit_code() == 1


def test_json_round_trip(tmp_path):
    rep = _report()
    path = tmp_path / "report.json"
    rep.to_json(path)
    back = VerificationReport.from_json(path)
    assert back.run_name == "unit"
    assert back.seed == 4
    assert [c.name for c in back.checks] == ["dpp", "value_regularity"]
    assert back.get("dpp").witness == {"t": 0.5, "offset": [0.1]}
    assert back.get("value_regularity").tolerance == pytest.approx(1.2)


def test_summary_text_and_frame():
    rep = _report()
    text = rep.summary_text()
    assert text.startswith("=== pmp-dpp-lab Run Summary (unit) ===")
    assert "INCONCLUSIVE" in text
    frame = rep.summary_frame()
    assert list(frame.columns) == ["name", "status", "margin", "tolerance", "runtime", "seed"]
    assert len(frame) == 2
