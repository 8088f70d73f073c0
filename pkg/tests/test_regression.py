
from __future__ import annotations

import numpy as np
import pytest

from pmp_dpp_lab.regression import RegressionBasis, RegressionError, project


def test_quadratic_target_is_reproduced():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 2))
    y = 1.0 + x[:, 0] - 2.0 * x[:, 0] * x[:, 1] + 0.5 * x[:, 1] ** 2
    fitted, stderr, cond = project(RegressionBasis(2), x, y)
    np.testing.assert_allclose(fitted, y, atol=1e-9)
    assert float(stderr) < 1e-9
    assert cond >= 1.0


def test_conditional_mean_of_noisy_target():
    rng = np.random.default_rng(1)
    x = rng.normal(size=4000)
    y = 2.0 * x + rng.normal(scale=0.5, size=x.size)
    proj = RegressionBasis(2).fit(x)
    fitted, stderr = proj.project(y)
    assert float(np.max(np.abs(fitted - 2.0 * x)[np.abs(x) < 2])) < 0.1
    assert float(stderr) == pytest.approx(0.5 * np.sqrt(3 / 4000), rel=0.1)
    lev = proj.leverage(x)
    assert float(np.mean(lev)) == pytest.approx(3 / 4000, rel=1e-8)


def test_deterministic_state_falls_back_to_constant():
    x = np.ones((100, 3))
    proj = RegressionBasis(2).fit(x)
    assert proj.columns == 1
    fitted, _ = proj.project(np.arange(100.0))
    np.testing.assert_allclose(fitted, 49.5)


def test_rank_deficiency_names_the_step():
    with pytest.raises(RegressionError) as err:
        RegressionBasis(2).fit(np.array([[0.0], [1.0]]), step=7)
    assert err.value.step == 7


def test_vector_targets_keep_shape():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 1))
    targets = np.stack([x[:, 0], x[:, 0] ** 2], axis=1)[:, :, None]
    fitted, stderr = RegressionBasis(2).fit(x).project(targets)
    assert fitted.shape == targets.shape
    assert stderr.shape == (2, 1)


def test_negative_degree_rejected():
    with pytest.raises(ValueError):
        RegressionBasis(-1)
