
from __future__ import annotations

import numpy as np
import pytest

from pmp_dpp_lab.spectral import SpectralOperator, TimeGrid, NoiseModel
from pmp_dpp_lab.problem import CoefficientSet, ControlSet, SpectralProblem
from pmp_dpp_lab.scenarios import make_lq1, make_bang_bang
from pmp_dpp_lab.riccati import solve_riccati
from pmp_dpp_lab.simulate import LinearFeedback
from pmp_dpp_lab.value import ValueField, compute_value

STEPS = 100
X0 = 1.0


def constant_problem(a: float, b: float, f: float, h: float = 0.0, steps: int = 10) -> SpectralProblem:
    """Scalar problem with constant coefficients, handy for direct-substitution checks."""
    coeffs = CoefficientSet(
        a=lambda t, x, u: np.full((x.shape[0], 1), a),
        b=lambda t, x, u: np.full((x.shape[0], 1, 1), b),
        f=lambda t, x, u: np.full(x.shape[0], f),
        h=lambda x: np.full(x.shape[0], h),
    )
    return SpectralProblem("constant", SpectralOperator.zero(1), coeffs, ControlSet(np.array([0.0])),
                           TimeGrid(0.0, 1.0, steps), NoiseModel(1, 0), np.array([X0]))


def riccati_feedback(sol) -> LinearFeedback:
    return LinearFeedback(lambda t: [[float(sol.gain(t))]])


@pytest.fixture(scope="session")
def lq1():
    return make_lq1(steps=STEPS)


@pytest.fixture(scope="session")
def lq1_oracle(lq1):
    return solve_riccati(lq1.lq, lq1.grid)


@pytest.fixture(scope="session")
def lq1_policy(lq1_oracle):
    return riccati_feedback(lq1_oracle)


@pytest.fixture(scope="session")
def lq1_field(lq1):
    return compute_value(lq1)


@pytest.fixture(scope="session")
def bang_bang():
    return make_bang_bang(steps=STEPS)


@pytest.fixture(scope="session")
def bang_bang_field(bang_bang):
    return compute_value(bang_bang, anchor_step=0.01)


@pytest.fixture
def quadratic_field():
    """V(t, x) = x^2 on a node-aligned axis with spacing 0.01."""
    axis = np.round(np.linspace(-2.0, 2.0, 401), 12)
    return ValueField.from_function(lambda t, X: X[:, 0] ** 2, TimeGrid(0.0, 1.0, 20), [axis])
