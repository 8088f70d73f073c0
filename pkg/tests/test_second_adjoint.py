
from __future__ import annotations

import numpy as np
import pytest

from conftest import constant_problem
from pmp_dpp_lab.backward import solve_first_adjoint
from pmp_dpp_lab.scenarios import make_lq
from pmp_dpp_lab.second_adjoint import (hamiltonian_H, hessian_H, solve_second_adjoint, TranspositionTestData,
                                        transposition_residual, wellposedness_bound)
from pmp_dpp_lab.simulate import ConstantPolicy, simulate_state

PATHS = 400


@pytest.fixture(scope="module")
def lq1_adjoints(lq1, lq1_policy):
    b = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, PATHS)
    first = solve_first_adjoint(lq1, b)
    return b, first, solve_second_adjoint(lq1, b, first)


def test_lq1_second_adjoint_is_deterministic(lq1, lq1_adjoints):
    b, _, second = lq1_adjoints
    expected = -2.0 * (1.0 + lq1.grid.T - b.times)
    np.testing.assert_allclose(second.P[:, :, 0, 0], np.broadcast_to(expected, (PATHS, b.steps + 1)), atol=1e-9)
    np.testing.assert_allclose(second.Q, 0.0, atol=1e-9)
    np.testing.assert_allclose(second.symmetry_defect, 0.0, atol=1e-12)
    assert len(second.diagnostics()) == b.steps + 1


def test_costless_problem_has_zero_second_adjoint():
    p = make_lq(0.0, 1.0, 0.5, 0.0, 1.0, 0.0, steps=20)
    b = simulate_state(p, (0.0, p.initial), ConstantPolicy(0.0), 100)
    second = solve_second_adjoint(p, b, solve_first_adjoint(p, b))
    np.testing.assert_allclose(second.P, 0.0, atol=1e-14)


def test_hamiltonian_values():
    p = constant_problem(4.0, 3.0, 5.0)
    x = np.zeros((2, 1))
    u = np.zeros((2, 1))
    pv = np.ones((2, 1))
    np.testing.assert_allclose(hamiltonian_H(p, 0.0, x, u, pv, np.zeros((2, 1, 1))), -1.0)
    np.testing.assert_allclose(hamiltonian_H(p, 0.0, x, u, pv, np.full((2, 1, 1), 2.0)), 5.0)


def test_lq1_hamiltonian_hessian(lq1):
    x = np.linspace(-1.0, 1.0, 5)[:, None]
    h = hessian_H(lq1, 0.2, x, -x, np.ones((5, 1)), np.ones((5, 1, 1)))
    assert h.shape == (5, 1, 1)
    np.testing.assert_allclose(h, -2.0)


def test_transposition_with_constant_test_processes(lq1, lq1_adjoints):
    b, first, second = lq1_adjoints
    data = TranspositionTestData.zero_drift(b, np.array([1.0]), np.array([-0.5]))
    result = transposition_residual(lq1, b, data, second, adjoint=first)
    assert result.lhs == pytest.approx(-4.0 * -0.5, abs=1e-9)
    assert result.residual < 1e-10


def test_transposition_with_diffusive_test_processes(lq1, lq1_adjoints):
    b, first, second = lq1_adjoints
    data = TranspositionTestData.zero_drift(b, np.array([1.0]), np.array([1.0]), v1=0.5, v2=0.5)
    result = transposition_residual(lq1, b, data, second, adjoint=first)
    # E<P phi1, phi2> picks up -2 (1/4) + int -2 (s/4) ds on top of -4
    assert result.rhs == pytest.approx(-4.75, abs=0.02)
    assert result.residual <= 4.0 * result.stderr + 0.05


def test_transposition_needs_adjoint_or_hessian(lq1, lq1_adjoints):
    b, _, second = lq1_adjoints
    data = TranspositionTestData.zero_drift(b, np.array([1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        transposition_residual(lq1, b, data, second)


def test_wellposedness_ratio(lq1_adjoints):
    _, _, second = lq1_adjoints
    assert wellposedness_bound(second, np.zeros((1, 1)), np.zeros((1, 1))) == 0.0
    ratio = wellposedness_bound(second, np.full((1, 1), 2.0), np.full((1, 1), -2.0))
    # sup |P| = 4 over |F| + |P_T| = 2 + 2
    assert ratio == pytest.approx(1.0, abs=1e-8)
