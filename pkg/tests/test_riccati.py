
from __future__ import annotations
import math

import numpy as np
import pytest

from pmp_dpp_lab.problem import LQParams
from pmp_dpp_lab.riccati import solve_riccati
from pmp_dpp_lab.spectral import TimeGrid

GRID = TimeGrid(0.0, 1.0, 100)


def test_lq1_constant_solution(lq1_oracle):
    np.testing.assert_allclose(lq1_oracle.pi, 1.0, atol=1e-10)
    assert lq1_oracle.c[0] == pytest.approx(0.25, abs=1e-10)
    assert float(lq1_oracle.value(0.0, 1.0)) == pytest.approx(1.25, abs=1e-10)
    assert float(lq1_oracle.gain(0.3)) == pytest.approx(-1.0, abs=1e-10)


def test_lq1_adjoint_oracles(lq1_oracle):
    assert float(lq1_oracle.p(0.5, 1.0)) == pytest.approx(-2.0)
    assert float(lq1_oracle.q(0.5)) == pytest.approx(-1.0)
    # P' = 2, P(T) = -2
    for t in (0.0, 0.25, 1.0):
        assert float(lq1_oracle.P(t)) == pytest.approx(-2.0 * (2.0 - t), abs=1e-10)
    assert float(lq1_oracle.value_t(0.5, 1.0)) == pytest.approx(-0.25, abs=1e-10)


def test_zero_state_cost_gives_zero_value():
    sol = solve_riccati(LQParams(0.0, 1.0, 0.5, 0.0, 1.0, 0.0, 1.0), GRID)
    np.testing.assert_array_equal(sol.pi, 0.0)
    assert float(sol.control(0.2, 3.0)) == 0.0


def test_second_fixed_point():
    sol = solve_riccati(LQParams(0.0, 1.0, 0.5, 3.0, 1.0, math.sqrt(3.0), 1.0), GRID)
    np.testing.assert_allclose(sol.pi, math.sqrt(3.0), atol=1e-10)


def test_rk4_against_closed_form():
    # pi' = pi^2 - 1 with pi(T) = 2: pi(t) = coth(T - t + atanh(1/2))
    sol = solve_riccati(LQParams(0.0, 1.0, 0.5, 1.0, 1.0, 2.0, 1.0), GRID)
    exact = 1.0 / np.tanh(1.0 - GRID.nodes + math.atanh(0.5))
    np.testing.assert_allclose(sol.pi, exact, rtol=1e-9)


def test_control_dependent_diffusion_rejected():
    with pytest.raises(ValueError):
        solve_riccati(LQParams(0.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, delta=0.2), GRID)
