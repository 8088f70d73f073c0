
from __future__ import annotations
from dataclasses import replace

import numpy as np
import pytest

from conftest import constant_problem
from pmp_dpp_lab.backward import AdjointFirst
from pmp_dpp_lab.checks import (CheckContext, OptimalRecord, build_optimal_record, check_seed, pmp_margin,
                                check_pmp, check_smooth_relations, check_superdiff_inclusions,
                                check_time_inclusion, check_value_regularity, check_dpp, check_transposition,
                                check_apriori, transposition_convergence, run_checks)
from pmp_dpp_lab.config import load_config
from pmp_dpp_lab.regression import RegressionBasis
from pmp_dpp_lab.runner import optimal_policy
from pmp_dpp_lab.scenarios import build_scenario
from pmp_dpp_lab.second_adjoint import solve_second_adjoint
from pmp_dpp_lab.simulate import simulate_state
from pmp_dpp_lab.value import compute_value

TRANSPOSITION_PATHS = 800


def _exact_record(p, policy, sign=1.0, paths=200):
    """LQ1 record with the closed-form adjoints p = -2X, q = -1."""
    b = simulate_state(p, (0.0, p.initial), policy, paths)
    L = b.steps
    adj = AdjointFirst(b.grid, -2.0 * sign * b.states, -np.ones((paths, L, 1, 1)), np.zeros((L + 1, 1)),
                       np.zeros((L, 1, 1)), np.ones(L))
    return OptimalRecord(b, adj, solve_second_adjoint(p, b, adj))


def test_pmp_margin_of_lq1_is_a_square(lq1):
    x = np.linspace(-1.0, 1.0, 7)[:, None]
    margin = pmp_margin(lq1, 0.5, x, -x, -2.0 * x, -np.ones((7, 1, 1)), np.full((7, 1, 1), -3.0))
    rho = lq1.controls.points[:, 0]
    np.testing.assert_allclose(margin, (x + rho[None, :]) ** 2, atol=1e-10)


def test_check_seeds_are_stable_and_distinct():
    assert check_seed(0, "pmp") == check_seed(0, "pmp")
    assert check_seed(0, "pmp") != check_seed(0, "dpp")
    assert check_seed(0, "pmp") != check_seed(1, "pmp")


def test_pmp_check_with_exact_adjoints(lq1, lq1_policy):
    res = check_pmp(CheckContext(lq1, _exact_record(lq1, lq1_policy)))
    assert res.passed
    assert res.details["min_margin"] >= -1e-10
    assert res.details["controls"] == lq1.controls.size


def test_pmp_check_flags_wrong_adjoint(lq1, lq1_policy):
    res = check_pmp(CheckContext(lq1, _exact_record(lq1, lq1_policy, sign=-1.0)))
    assert res.failed
    assert {"time", "path", "rho", "margin"} <= set(res.witness)


def test_value_regularity_of_quadratic_field(quadratic_field):
    res = check_value_regularity(CheckContext(constant_problem(0.0, 0.0, 0.0), value_field=quadratic_field))
    assert res.passed
    assert res.details["holder"] == (0.0, 0.0)


def test_run_checks_orders_and_times_results(quadratic_field):
    ctx = CheckContext(constant_problem(0.0, 0.0, 0.0), value_field=quadratic_field)
    results = run_checks(ctx, ["value_regularity"])
    assert [r.name for r in results] == ["value_regularity"]
    assert results[0].runtime >= 0.0


def test_run_checks_rejects_unknown_or_unsupported(quadratic_field):
    ctx = CheckContext(constant_problem(0.0, 0.0, 0.0), value_field=quadratic_field)
    with pytest.raises(ValueError):
        run_checks(ctx, ["pmp_strong"])
    with pytest.raises(ValueError):
        run_checks(ctx, ["pmp"])


def _preset_context(name: str) -> CheckContext:
    """The context `run_experiment` hands to the checks of a preset."""
    cfg = load_config(name)
    basis = RegressionBasis(cfg.basis_degree)
    p = build_scenario(cfg.scenario, cfg.params, steps=cfg.steps, seed=cfg.seed, control_step=cfg.control_step,
                       control_range=cfg.control_range, box=cfg.anchor_box)
    fld = compute_value(p, steps=cfg.value_steps or cfg.steps, anchor_step=cfg.anchor_step, basis=basis)
    policy, _ = optimal_policy(p, fld)
    record = build_optimal_record(p, policy, cfg.paths, basis, stream=0)
    return CheckContext(p, record, fld, policy, seed=cfg.seed, sample_times=cfg.sample_times,
                        sample_paths=cfg.sample_paths, tolerance_scale=cfg.tolerance_scale,
                        paths=min(cfg.paths, 4000), branches=cfg.branches, smooth=p.lq is not None, basis=basis)


@pytest.fixture(scope="module")
def lq1_smoke():
    return _preset_context("lq1-smoke")


@pytest.fixture(scope="module")
def bang_bang_preset():
    return _preset_context("bang-bang")


@pytest.fixture(scope="module")
def lq1_transposition_record(lq1, lq1_policy):
    return build_optimal_record(lq1, lq1_policy, TRANSPOSITION_PATHS)


def test_context_defaults(lq1):
    ctx = CheckContext(lq1)
    assert ctx.record is None and ctx.value_field is None and ctx.policy is None
    assert isinstance(ctx.basis, RegressionBasis)
    assert CheckContext(lq1).basis is not ctx.basis


def test_value_regularity_growth_is_stable(quadratic_field):
    res = check_value_regularity(CheckContext(constant_problem(0.0, 0.0, 0.0), value_field=quadratic_field))
    coarse, dense = res.details["growth"]
    assert coarse <= dense <= 1.2 * coarse
    assert res.details["delta"] == pytest.approx(0.1)


def test_smooth_relations_on_lq1_smoke(lq1_smoke):
    res = check_smooth_relations(lq1_smoke)
    assert not res.failed
    assert res.details["points"] > 0


def test_smooth_relations_flag_wrong_adjoint(lq1_smoke, lq1_policy):
    ctx = replace(lq1_smoke, record=_exact_record(lq1_smoke.problem, lq1_policy, sign=-1.0))
    res = check_smooth_relations(ctx)
    assert res.failed
    assert res.witness["relation"] == "V_x=-p"


def test_superdiff_inclusions_on_lq1_smoke(lq1_smoke):
    res = check_superdiff_inclusions(lq1_smoke)
    assert not res.failed
    assert res.details["points"] > 0


def test_time_inclusion_on_lq1_smoke(lq1_smoke):
    res = check_time_inclusion(lq1_smoke)
    assert not res.failed
    assert res.details["pairing_defect"] <= 1e-12
    # E|X(tau) - X(t)|^2 = tau - t over 4 plus a (tau - t)^2 drift part
    assert 0.8 <= res.details["time_variation_order"] <= 1.3


def test_dpp_on_bang_bang_preset(bang_bang_preset):
    res = check_dpp(bang_bang_preset)
    assert not res.failed
    assert res.witness["identity"] in ("dpp_gap", "splicing", "martingale")
    assert abs(res.details["splice_lhs"] - res.details["splice_rhs"]) <= 2.0 * res.details["splice_stderr"] + 1e-12


def test_transposition_check_and_convergence_order(lq1, lq1_policy, lq1_transposition_record):
    res = check_transposition(CheckContext(lq1, lq1_transposition_record, policy=lq1_policy))
    assert res.passed
    assert res.details["order"] >= 0.4
    assert [r["steps"] for r in res.details["convergence"]] == [25, 50, 100]
    assert [r["paths"] for r in res.details["convergence"]] == [200, 400, 800]
    assert res.details["terms"]["zero_drift"]["P_xi"] == pytest.approx(-4.0, abs=1e-9)


def test_transposition_check_rejects_scaled_second_adjoint(lq1, lq1_transposition_record):
    rec = lq1_transposition_record
    second = replace(rec.second, P=0.9 * rec.second.P, Q=0.9 * rec.second.Q)
    res = check_transposition(CheckContext(lq1, OptimalRecord(rec.bundle, rec.adjoint, second)))
    assert res.failed
    assert res.details["terms"]["zero_drift"]["P_xi"] == pytest.approx(-3.6, abs=1e-9)
    assert "order" not in res.details


def test_transposition_convergence_needs_matching_levels(lq1, lq1_policy):
    with pytest.raises(ValueError):
        transposition_convergence(lq1, lq1_policy, steps=(25, 50), paths=(100,))


def test_apriori_constants_are_stable_on_lq1(lq1, lq1_policy):
    res = check_apriori(CheckContext(lq1, policy=lq1_policy), paths=500)
    assert res.passed
    assert res.witness["partition_defect"] == 0.0
    assert res.witness["spread_slope"] < 0.0
    # sup_s E|X(s)|^2 / (1 + |eta|^2) peaks at s = 0 for eta = x0 = 1
    assert res.details["moment"] == pytest.approx((0.5, 0.5), abs=1e-12)
    assert res.details["moment_dt"] == pytest.approx((0.5, 0.5), abs=1e-12)
    assert {"bsde", "bsde_dt"} <= set(res.details)
