
from __future__ import annotations
import math

import numpy as np
import pytest
from scipy import stats

from pmp_dpp_lab.spectral import (SpectralOperator, TimeGrid, NoiseModel, sample_increments, coarsen_increments,
                                  semigroup_apply, hs_norm)


def test_semigroup_identity_at_zero():
    op = SpectralOperator.diagonal([1.0, 4.0, 9.0])
    v = np.array([0.3, -1.2, 2.0])
    np.testing.assert_array_equal(semigroup_apply(op, 0.0, v), v)


def test_semigroup_diagonal_values():
    assert semigroup_apply(SpectralOperator.diagonal([1.0]), math.log(2.0), np.array([1.0]))[0] == pytest.approx(0.5)
    out = semigroup_apply(SpectralOperator.diagonal([1.0, 4.0]), 0.5, np.array([1.0, 1.0]))
    np.testing.assert_allclose(out, [math.exp(-0.5), math.exp(-2.0)], rtol=1e-14)


def test_semigroup_rejects_negative_time():
    with pytest.raises(ValueError):
        SpectralOperator.diagonal([1.0]).apply(-0.1, np.ones(1))


def test_wave_rotation_preserves_norm():
    op = SpectralOperator.wave([math.pi, 2 * math.pi])
    v = np.array([1.0, 0.5, -0.3, 2.0])
    for t in (0.1, 0.37, 1.0):
        assert np.linalg.norm(op.apply(t, v)) == pytest.approx(np.linalg.norm(v), rel=1e-13)


def test_adjoint_and_conjugate_match_matrices():
    op = SpectralOperator.wave([1.5])
    s = op.semigroup(0.3)
    v = np.array([0.2, -0.7])
    m = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(op.apply_adjoint(0.3, v), s.T @ v)
    np.testing.assert_allclose(op.conjugate(0.3, m), s.T @ m @ s)
    w = np.array([1.0, 3.0])
    assert float(op.generator_apply(w) @ v) == pytest.approx(float(w @ op.generator_adjoint_apply(v)))


def test_operator_validation():
    with pytest.raises(ValueError):
        SpectralOperator.diagonal([])
    with pytest.raises(ValueError):
        SpectralOperator(np.zeros(3), np.array([1.0]))


def test_time_grid_nodes_and_index():
    grid = TimeGrid(0.0, 1.0, 100)
    assert grid.dt == pytest.approx(0.01)
    assert grid.nodes[-1] == 1.0
    assert grid.index_of(0.5) == 50
    with pytest.raises(ValueError):
        grid.index_of(0.505)
    window = grid.window(25, 75)
    assert window.steps == 50
    assert window.t0 == pytest.approx(0.25)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 10)


def test_increments_are_deterministic():
    noise = NoiseModel(2, seed=7)
    grid = TimeGrid(0.0, 1.0, 20)
    np.testing.assert_array_equal(sample_increments(noise, grid, 50), sample_increments(noise, grid, 50))


def test_path_streams_do_not_depend_on_batch_layout():
    noise = NoiseModel(1, seed=3)
    full = noise.standard_normals(5, 1100, stream=2)
    part = noise.standard_normals(5, 10, stream=2, first_path=1020)
    np.testing.assert_array_equal(part, full[1020:1030])


def test_increment_mean_and_variance():
    grid = TimeGrid(0.0, 1.0, 10)
    M = 100_000
    dw = sample_increments(NoiseModel(1, seed=0), grid, M)
    assert abs(float(np.mean(dw[:, 0, 0]))) < 4.0 * math.sqrt(grid.dt / M)
    assert float(np.var(dw)) == pytest.approx(grid.dt, rel=0.02)


def test_increments_are_gaussian():
    grid = TimeGrid(0.0, 1.0, 4)
    dw = sample_increments(NoiseModel(2, seed=11), grid, 25_000)
    for l in range(2):
        z = dw[:, :, l].reshape(-1) / math.sqrt(grid.dt)
        assert stats.kstest(z, "norm").pvalue > 0.01


def test_coarsen_sums_fine_increments():
    dw = np.arange(24, dtype=float).reshape(2, 6, 2)
    coarse = coarsen_increments(dw, 3)
    assert coarse.shape == (2, 2, 2)
    np.testing.assert_array_equal(coarse[0, 0], dw[0, :3].sum(axis=0))
    with pytest.raises(ValueError):
        coarsen_increments(dw, 4)


def test_hs_norm():
    b = np.array([[[3.0, 0.0], [0.0, 4.0]]])
    assert hs_norm(b)[0] == pytest.approx(5.0)
