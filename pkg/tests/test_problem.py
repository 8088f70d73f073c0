
from __future__ import annotations
from dataclasses import replace

import numpy as np
import pytest

from pmp_dpp_lab.problem import (ControlSet, CoefficientSet, AssumptionError, validate_assumptions, fd_jacobian,
                                 SpectralProblem)
from pmp_dpp_lab.scenarios import make_heat
from pmp_dpp_lab.spectral import SpectralOperator, TimeGrid, NoiseModel


def test_control_grid_and_nearest():
    u = ControlSet.grid(-1.0, 1.0, 0.5)
    assert u.size == 5
    assert u.dim == 1
    # ties go to the lowest index
    assert u.nearest(np.array([0.25]))[0] == 2
    assert u.nearest(np.array([0.9]))[0] == 4
    np.testing.assert_array_equal(u.index_of(np.array([0.5, 0.3])), [3, -1])


def test_control_set_reshapes_flat_points():
    u = ControlSet(np.array([-1.0, 1.0]))
    assert u.points.shape == (2, 1)
    assert float(u.distance(u.points[0], u.points[1])) == pytest.approx(2.0)


def test_lq1_assumptions_pass(lq1):
    report = validate_assumptions(lq1, samples=200, seed=1)
    assert report.passed, report.failed()
    assert report.constant("lip:a_u") == pytest.approx(1.0)
    assert report.constant("lip:a") == pytest.approx(0.0)
    assert report.get("deriv:h_x").passed


def test_heat_assumptions_pass():
    p = make_heat(8, "tanh", steps=10)
    report = validate_assumptions(p, samples=200, seed=2)
    assert report.passed, report.failed()


def test_quadratic_terminal_flagged_only_in_global_mode(lq1):
    bounded = validate_assumptions(lq1, samples=200, seed=3)
    assert bounded.get("lip:h").passed
    unbounded = validate_assumptions(lq1, samples=200, seed=3, mode="global")
    assert not unbounded.get("lip:h").passed


def test_derivative_cross_check_sin():
    x = np.linspace(-2.0, 2.0, 41)[:, None]
    approx = fd_jacobian(lambda y: np.sin(y), x, 1e-4)
    np.testing.assert_allclose(approx[:, 0, 0], np.cos(x[:, 0]), atol=1e-6)


def test_non_finite_coefficient_names_the_point(lq1):
    bad = replace(lq1.coefficients, f=lambda t, x, u: np.full(x.shape[0], np.nan))
    p = replace(lq1, coefficients=bad)
    with pytest.raises(AssumptionError) as err:
        validate_assumptions(p, samples=100)
    assert err.value.name == "f"
    assert "x" in err.value.point


def test_shape_mismatch_rejected(lq1):
    bad = replace(lq1.coefficients, f=lambda t, x, u: x)
    with pytest.raises(ValueError):
        replace(lq1, coefficients=bad)


def test_validate_needs_enough_samples(lq1):
    with pytest.raises(ValueError):
        validate_assumptions(lq1, samples=10)


def test_default_initial_state():
    coeffs = CoefficientSet(a=lambda t, x, u: 0.0 * x, b=lambda t, x, u: np.zeros((x.shape[0], 2, 1)),
                            f=lambda t, x, u: np.zeros(x.shape[0]), h=lambda x: np.zeros(x.shape[0]))
    p = SpectralProblem("free", SpectralOperator.zero(2), coeffs, ControlSet(np.zeros(1)), TimeGrid(0.0, 1.0, 5),
                        NoiseModel(1, 0))
    np.testing.assert_array_equal(p.initial, np.ones(2))
