
from __future__ import annotations
import math

import numpy as np
import pytest

from pmp_dpp_lab.scenarios import (build_scenario, list_scenarios, resolve_scenario, make_lq, make_heat, make_wave,
                                   bang_bang_value)
from pmp_dpp_lab.simulate import ConstantPolicy, simulate_state


def test_list_scenarios_contains_builtins():
    text = list_scenarios()
    assert "lq1" in text
    assert len(text.splitlines()) >= 5


def test_sized_names_resolve():
    spec, implied = resolve_scenario("heat-4")
    assert spec.name == "heat-N"
    assert implied == {"N": 4}
    with pytest.raises(ValueError):
        resolve_scenario("plasma-3")


def test_build_scenario_rejects_unknown_parameter():
    with pytest.raises(ValueError):
        build_scenario("lq1", {"volatility": 2.0})


def test_build_scenario_applies_grid_keys():
    p = build_scenario("lq1", steps=40, seed=5, control_step=0.1, control_range=(-1.0, 1.0), box=None)
    assert p.grid.steps == 40
    assert p.noise.seed == 5
    assert p.controls.size == 21
    assert p.box == 3.0


def test_bang_bang_ignores_control_keys():
    p = build_scenario("bang-bang", steps=20, control_step=0.1)
    assert p.controls.size == 2


def test_lq_preconditions():
    with pytest.raises(ValueError):
        make_lq(0.0, 1.0, 0.5, 1.0, 0.0, 1.0)


def test_heat_single_mode_linear_profile_carries_lq_data():
    p = build_scenario("heat-1", {"profile": "linear"}, steps=20)
    assert p.lq is not None
    assert p.lq.alpha == pytest.approx(-math.pi ** 2)
    assert p.lq.beta == pytest.approx(2.0 * math.sqrt(2.0) / math.pi, rel=1e-3)


def test_heat_profile_bound_enforced():
    with pytest.raises(ValueError):
        make_heat(2, "tanh", bound=0.5)


def test_free_wave_conserves_energy():
    p = make_wave(4, "zero", steps=50)
    b = simulate_state(p, (0.0, p.initial), ConstantPolicy([0.0]), 3)
    energy = np.sum(b.states ** 2, axis=2)
    np.testing.assert_allclose(energy, np.sum(p.initial ** 2), rtol=1e-12)


def test_bang_bang_closed_form():
    assert float(bang_bang_value(0.0, 1.5)) == pytest.approx(0.25)
    assert float(bang_bang_value(0.0, 0.5)) == 0.0
    assert float(bang_bang_value(0.5, -2.0)) == pytest.approx(2.25)
