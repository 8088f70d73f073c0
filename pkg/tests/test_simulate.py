
from __future__ import annotations
from dataclasses import replace
import math

import numpy as np
import pytest

from conftest import constant_problem
from pmp_dpp_lab.simulate import (ConstantPolicy, OpenLoopPolicy, SimulationError, simulate_state,
                                  simulate_test_process, variation_ladder, branch_bundle, strong_order_study,
                                  partition_mixing_defect, stability_ratio, time_variation_ladder)
from pmp_dpp_lab.scenarios import make_heat
from pmp_dpp_lab.spectral import SpectralOperator

# dX = -X dt + 0.5 dW, X(0) = 1
OU_SECOND_MOMENT = math.exp(-2.0) + 0.125 * (1.0 - math.exp(-2.0))
OU_PATHS = 20_000


def test_optimal_lq1_state_second_moment(lq1, lq1_policy):
    b = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, OU_PATHS)
    assert float(np.mean(b.states[:, -1, 0] ** 2)) == pytest.approx(OU_SECOND_MOMENT, abs=0.01)
    np.testing.assert_allclose(b.controls[:, :, 0], -b.states[:, :-1, 0], atol=1e-12)


def test_free_dynamics_follow_the_semigroup():
    p = replace(constant_problem(0.0, 0.0, 0.0), operator=SpectralOperator.diagonal([1.0]))
    b = simulate_state(p, (0.0, np.array([2.0])), ConstantPolicy(0.0), 4)
    np.testing.assert_allclose(b.states[:, :, 0], 2.0 * np.exp(-b.times)[None, :], rtol=1e-12)


def test_simulation_is_deterministic_and_sliceable(lq1, lq1_policy):
    full = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, 40)
    again = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, 40)
    part = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, 10, first_path=30)
    np.testing.assert_array_equal(full.states, again.states)
    np.testing.assert_array_equal(part.states, full.states[30:])
    np.testing.assert_array_equal(part.path_ids, np.arange(30, 40))


def test_window_start_reuses_the_same_noise(lq1, lq1_policy):
    full = simulate_state(lq1, (0.0, lq1.initial), ConstantPolicy(0.0), 5)
    late = simulate_state(lq1, (0.5, lq1.initial), ConstantPolicy(0.0), 5)
    np.testing.assert_array_equal(late.increments, full.increments[:, 50:])
    assert late.first_step == 50
    assert late.steps == 50


def test_open_loop_replay_reproduces_the_bundle(lq1, lq1_policy):
    b = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, 20)
    replay = simulate_state(lq1, (0.0, lq1.initial), OpenLoopPolicy.from_bundle(b), 20)
    np.testing.assert_array_equal(replay.states, b.states)


def test_partition_mixing_is_exact(lq1, lq1_policy):
    labels = np.random.default_rng(4).integers(0, 2, size=64)
    defect = partition_mixing_defect(lq1, (0.0, lq1.initial), [ConstantPolicy(0.5), lq1_policy], labels, 64)
    assert defect == 0.0


def test_divergence_names_path_and_step():
    base = constant_problem(0.0, 0.0, 0.0)
    blow = replace(base.coefficients, a=lambda t, x, u: x * 1e200)
    p = replace(base, coefficients=blow)
    with pytest.raises(SimulationError) as err:
        with np.errstate(over="ignore", invalid="ignore"):
            simulate_state(p, (0.0, p.initial), ConstantPolicy(0.0), 3)
    assert err.value.path == 0
    assert err.value.step == 2


def test_bundle_frame_layout(lq1, lq1_policy):
    b = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, 6)
    frame = b.to_frame(max_paths=2)
    assert len(frame) == 2 * (lq1.grid.steps + 1)
    assert list(frame.columns) == ["path", "step", "time", "x0", "control_index"]
    assert frame["control_index"].iloc[lq1.grid.steps] == -1


def test_zero_test_process_keeps_initial_value():
    p = constant_problem(0.0, 1.0, 0.0)
    b = simulate_state(p, (0.0, p.initial), ConstantPolicy(0.0), 8)
    phi = simulate_test_process(p, b, np.zeros((1, 1)), np.zeros((1, 1, 1)), np.array([0.7]))
    np.testing.assert_array_equal(phi.states, 0.7)
    with pytest.raises(ValueError):
        simulate_test_process(p, b, np.zeros((2, 2)), np.zeros((1, 1, 1)), np.array([0.7]))


def test_variation_of_linear_dynamics_is_a_translation(lq1, lq1_policy):
    b = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, 50)
    frame, slopes = variation_ladder(lq1, b, 0.5, [0.1, 0.05, 0.025])
    assert slopes["sup_xi2"] == pytest.approx(2.0, abs=1e-6)
    np.testing.assert_allclose(frame["eps_a2"], 0.0, atol=1e-20)
    np.testing.assert_allclose(frame["sup_xi2"], frame["radius"] ** 2, rtol=1e-8)


def test_branches_start_on_the_bundle_path(lq1, lq1_policy):
    b = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, 10)
    one = branch_bundle(lq1, b, 0.3, 3, lq1_policy, branches=32)
    two = branch_bundle(lq1, b, 0.3, 3, lq1_policy, branches=32)
    np.testing.assert_array_equal(one.states[:, 0], np.broadcast_to(b.states[3, 30], (32, 1)))
    np.testing.assert_array_equal(one.states, two.states)
    other = branch_bundle(lq1, b, 0.3, 4, lq1_policy, branches=32)
    assert not np.array_equal(one.increments, other.increments)


def test_exponential_euler_strong_order(lq1, lq1_policy):
    frame, slope = strong_order_study(lq1, lq1_policy, levels=3, paths=1000, base_steps=8)
    assert len(frame) == 3
    assert slope > 0.6


def test_identical_inputs_have_zero_stability_ratio(lq1, lq1_policy):
    assert stability_ratio(lq1, lq1.initial, lq1.initial, lq1_policy, lq1_policy, 20) == 0.0


def test_nonlinear_remainders_are_second_order():
    p = make_heat(2, "tanh", steps=100)
    b = simulate_state(p, (0.0, p.initial), ConstantPolicy(0.0), 200)
    frame, slopes = variation_ladder(p, b, 0.5, [0.2, 0.1, 0.05])
    assert np.all(frame["eps_a2"] > 0.0)
    assert slopes["eps_a2"] > 2.0
    assert slopes["eps_b2"] > 2.0


def test_time_variation_is_first_order(lq1, lq1_policy):
    b = simulate_state(lq1, (0.0, lq1.initial), lq1_policy, 2000)
    frame, slope = time_variation_ladder(lq1, b, 0.25)
    assert list(frame.columns) == ["lag", "sup_xi2", "constant"]
    np.testing.assert_allclose(frame["lag"], [0.01, 0.02, 0.04, 0.08])
    assert 0.8 <= slope <= 1.3
    with pytest.raises(ValueError):
        time_variation_ladder(lq1, b, 0.98)
