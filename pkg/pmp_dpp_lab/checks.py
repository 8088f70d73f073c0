
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math
import time
import zlib

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .problem import SpectralProblem
from .regression import RegressionBasis
from .simulate import (PathBundle, ControlPolicy, ConstantPolicy, simulate_state, branch_bundle,
                       fit_moment_constant, partition_mixing_defect, time_variation_ladder)
from .spectral import TimeGrid
from .backward import (AdjointFirst, solve_first_adjoint, cost_functional, path_costs, backward_evaluator,
                       fit_bsde_constant, deterministic_value_spread)
from .second_adjoint import (AdjointSecond, solve_second_adjoint, hamiltonian_H, TranspositionTestData,
                             transposition_residual)
from .value import (ValueField, FieldPolicy, dpp_consistency, hamiltonian_G, numeric_differentials,
                    superdiff_membership, subdiff_membership, time_superdiff_membership)
from .report import CheckResult, status_of

logger = logging.getLogger("pmp_dpp_lab.checks")

DEFAULT_SAMPLE_TIMES = 20
DEFAULT_SAMPLE_PATHS = 64


@dataclass
class OptimalRecord:
    """The full optimal record (X, u, p, q, P, Q, Qhat) computed on one bundle."""

    bundle: PathBundle
    adjoint: AdjointFirst
    second: AdjointSecond

    @property
    def Q_hat(self) -> np.ndarray:
        return self.second.Q_hat

    def septuple(self, i: int, rows) -> Tuple[np.ndarray, ...]:
        """(X, u, p, q, P, Q, Qhat) at step i for the given rows (Q fields of the last step repeat L-1)."""
        b, a, s = self.bundle, self.adjoint, self.second
        j = min(i, b.steps - 1)
        return (b.states[rows, i], b.controls[rows, j], a.p[rows, i], a.q[rows, j], s.P[rows, i],
                s.Q[rows, j], self.Q_hat[rows, j])


def build_optimal_record(p: SpectralProblem, policy: ControlPolicy, paths: int,
                         basis: RegressionBasis = RegressionBasis(), stream: int = 0, grid=None,
                         progress: bool = False) -> OptimalRecord:
    bundle = simulate_state(p, (p.grid.t0 if grid is None else grid.t0, p.initial), policy, paths,
                            stream=stream, grid=grid)
    adj = solve_first_adjoint(p, bundle, basis, progress=progress)
    sec = solve_second_adjoint(p, bundle, adj, basis, progress=progress)
    return OptimalRecord(bundle, adj, sec)


@dataclass
class CheckContext:
    """Everything a check may read; checks never mutate it."""

    problem: SpectralProblem
    record: Optional[OptimalRecord] = None
    value_field: Optional[ValueField] = None
    policy: Optional[ControlPolicy] = None
    seed: int = 0
    sample_times: int = DEFAULT_SAMPLE_TIMES
    sample_paths: int = DEFAULT_SAMPLE_PATHS
    tolerance_scale: float = 3.0
    paths: int = 4000
    branches: int = 256
    smooth: bool = False
    basis: RegressionBasis = field(default_factory=RegressionBasis)


def check_seed(seed: int, name: str) -> int:
    """Sub-seed owned by one check."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _result(name: str, ok: bool, margin: float, tol: float, seed: int, witness=None, details=None,
            inconclusive: bool = False) -> CheckResult:
    res = CheckResult(name, status_of(ok, inconclusive and ok), float(margin), float(tol), seed=seed,
                      witness=witness or {}, details=details or {})
    log = logger.warning if res.failed else logger.info
    log(f"check {name}: {res.status} (margin {res.margin:.4g}, tol {res.tolerance:.4g})")
    return res


def _sample(rng: np.random.Generator, candidates: Sequence[int], k: int) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=int)
    if candidates.size <= k:
        return candidates
    return np.sort(rng.choice(candidates, size=k, replace=False))


def _control_step(p: SpectralProblem) -> float:
    pts = p.controls.points
    if pts.shape[0] < 2:
        return 0.0
    if pts.shape[1] == 1:
        return float(np.min(np.diff(np.sort(pts[:, 0]))))
    d = np.sqrt(np.sum((pts[:, None] - pts[None]) ** 2, axis=-1))
    return float(np.min(d[d > 0]))


def _common_steps(record: OptimalRecord, field_: ValueField, tail: float = 0.0) -> List[Tuple[int, float]]:
    """(record step, time) for bundle nodes that are also field nodes, with t + tail <= T."""
    out = []
    for i, t in enumerate(record.bundle.times[:-1]):
        k = (t - field_.grid.t0) / field_.grid.dt
        if abs(k - round(k)) < 1e-6 and t >= field_.grid.t0 - 1e-12 and t + tail <= field_.grid.T + 1e-12:
            out.append((i, float(t)))
    return out


def _interior_rows(field_: ValueField, x: np.ndarray, reach: float) -> np.ndarray:
    shift = np.full(x.shape[1], reach)
    ok = ~field_.outside(x + shift) & ~field_.outside(x - shift)
    return np.flatnonzero(ok)


# ---------- maximum principle ----------

def pmp_margin(p: SpectralProblem, t: float, x: np.ndarray, u: np.ndarray, pv: np.ndarray, qv: np.ndarray,
               Pm: np.ndarray, rho: Optional[np.ndarray] = None) -> np.ndarray:
    """H(t,X,u,p,q) - H(t,X,rho,p,q) - 1/2 <P (b(u) - b(rho)), b(u) - b(rho)> for rows x every rho, shape (S, K)."""
    rho = p.controls.points if rho is None else np.atleast_2d(np.asarray(rho, dtype=float))
    S, K = x.shape[0], rho.shape[0]
    rep = lambda v: np.repeat(v, K, axis=0)
    R = np.tile(rho, (S, 1))
    X, U, PV, QV, PM = rep(x), rep(u), rep(pv), rep(qv), rep(Pm)
    c = p.coefficients
    db = c.b(t, X, U) - c.b(t, X, R)
    out = (hamiltonian_H(p, t, X, U, PV, QV) - hamiltonian_H(p, t, X, R, PV, QV)
           - 0.5 * np.einsum("mij,mjl,mil->m", PM, db, db))
    return out.reshape(S, K)


def check_pmp(ctx: CheckContext) -> CheckResult:
    """Second-order maximum condition over sampled (t, omega) and the full control grid."""
    name = "pmp"
    seed = check_seed(ctx.seed, name)
    rng = np.random.default_rng(seed)
    p, rec = ctx.problem, ctx.record
    b = rec.bundle
    steps = _sample(rng, range(b.steps), ctx.sample_times)
    rows = _sample(rng, range(b.paths), ctx.sample_paths)
    c = p.coefficients
    worst = (np.inf, 0.0, {})
    lowest = np.inf
    for i in steps:
        t = float(b.times[i])
        x, u, pv, qv, Pm, _, _ = rec.septuple(i, rows)
        margin = pmp_margin(p, t, x, u, pv, qv, Pm)
        S, K = margin.shape
        proj = ctx.basis.fit(b.states[:, i], b.first_step + i)
        spread = np.sqrt(proj.leverage(x) * b.paths / proj.columns)[:, None]
        X = np.repeat(x, K, axis=0)
        U = np.repeat(u, K, axis=0)
        R = np.tile(p.controls.points, (S, 1))
        da = np.sqrt(np.sum((c.a(t, X, U) - c.a(t, X, R)) ** 2, axis=1)).reshape(S, K)
        db2 = np.sum((c.b(t, X, U) - c.b(t, X, R)) ** 2, axis=(1, 2)).reshape(S, K)
        se = spread * (da * float(np.linalg.norm(rec.adjoint.stderr_p[i]))
                       + np.sqrt(db2) * float(np.linalg.norm(rec.adjoint.stderr_q[min(i, b.steps - 1)]))
                       + 0.5 * db2 * float(rec.second.stderr_P[i]))
        tol = ctx.tolerance_scale * se + 1e-10
        excess = margin + tol
        r, k = np.unravel_index(int(np.argmin(excess)), excess.shape)
        lowest = min(lowest, float(margin.min()))
        if excess[r, k] < worst[0]:
            worst = (float(excess[r, k]), float(tol[r, k]),
                     {"time": t, "path": int(b.path_ids[rows[r]]), "rho": p.controls.points[k].tolist(),
                      "margin": float(margin[r, k])})
    excess, tol, witness = worst
    return _result(name, excess >= 0.0, witness.get("margin", 0.0), tol, seed, witness,
                   {"sense": ">= -tolerance", "min_margin": lowest, "times": int(len(steps)),
                    "paths": int(len(rows)), "controls": p.controls.size})


# ---------- smooth case ----------

def check_smooth_relations(ctx: CheckContext, rel_tol: float = 0.05, floor: float = 0.25,
                           paths_per_time: int = 8) -> CheckResult:
    """V_x = -p, V_xx b = -q, and u attains max_rho G(t, X, rho, -V_x, -V_xx) along the trajectory.

    Regression errors of p and q are read pointwise: the path-averaged standard error times
    sqrt(leverage * M / k), never below the average.
    """
    name = "smooth_relations"
    seed = check_seed(ctx.seed, name)
    rng = np.random.default_rng(seed)
    p, rec, fld = ctx.problem, ctx.record, ctx.value_field
    b = rec.bundle
    h = 2.0 * fld.spacing()
    common = _common_steps(rec, fld, tail=fld.grid.dt)
    chosen = _sample(rng, range(len(common)), ctx.sample_times)
    step_u = _control_step(p)
    worst = (-np.inf, 0.0, {})
    evaluated, noisy = 0, 0
    c = p.coefficients
    K = p.controls.size
    for j in chosen:
        i, t = common[j]
        inside = _interior_rows(fld, b.states[:, i], 2 * h)
        if inside.size == 0:
            continue
        rows = _sample(rng, inside, paths_per_time)
        x, u, pv, qv, _, _, _ = rec.septuple(i, rows)
        proj = ctx.basis.fit(b.states[:, i], b.first_step + i)
        spread = np.maximum(np.sqrt(proj.leverage(x) * b.paths / proj.columns), 1.0)
        for r in range(rows.size):
            d = numeric_differentials(fld, t, x[r], h=h)
            evaluated += 1
            noisy += int(d.noise_dominated["v_x"])
            se_p = spread[r] * float(np.linalg.norm(rec.adjoint.stderr_p[i]))
            se_q = spread[r] * float(np.linalg.norm(rec.adjoint.stderr_q[min(i, b.steps - 1)]))
            denom_p = max(float(np.linalg.norm(pv[r])), floor)
            err_p = float(np.linalg.norm(d.v_x + pv[r])) / denom_p
            tol_p = rel_tol + ctx.tolerance_scale * (float(np.linalg.norm(d.err_x)) + se_p) / denom_p
            bb = c.b(t, x[r:r + 1], u[r:r + 1])[0]
            denom_q = max(float(np.linalg.norm(qv[r])), floor)
            err_q = float(np.linalg.norm(d.v_xx @ bb + qv[r])) / denom_q
            tol_q = rel_tol + ctx.tolerance_scale * (float(np.linalg.norm(d.err_xx @ np.abs(bb))) + se_q) / denom_q
            X = np.repeat(x[r:r + 1], K, axis=0)
            G = hamiltonian_G(p, t, X, p.controls.points, np.repeat(-d.v_x[None], K, axis=0),
                              np.repeat(-d.v_xx[None], K, axis=0))
            k = int(np.argmax(G))
            dist = float(p.controls.distance(p.controls.points[k], u[r]))
            tol_u = step_u * (1.0 + 1e-6) + 1e-12
            for rel, err, tol in (("V_x=-p", err_p, tol_p), ("V_xx b=-q", err_q, tol_q), ("argmax G", dist, tol_u)):
                if err - tol > worst[0]:
                    worst = (err - tol, tol, {"relation": rel, "time": t, "path": int(b.path_ids[rows[r]]),
                                              "error": err})
    if evaluated == 0:
        return _result(name, True, 0.0, 0.0, seed, {}, {"reason": "no interior sample points"}, inconclusive=True)
    excess, tol, witness = worst
    return _result(name, excess <= 0.0, witness["error"], tol, seed, witness,
                   {"sense": "<= tolerance", "points": evaluated, "noise_dominated": noisy, "h": h},
                   inconclusive=noisy == evaluated)


# ---------- superdifferential inclusions ----------

def check_superdiff_inclusions(ctx: CheckContext, kappas: Sequence[float] = (0.5, 1.0),
                               radii: Sequence[float] = (0.4, 0.2, 0.1), sample_times: int = 10,
                               shift: float = 0.5, rel_tol: float = 0.05, floor: float = 0.25) -> CheckResult:
    """(-p, -P + kappa I) in D_x^{2,+} V(t, X(t)); (-p + shift, -P) must be rejected; any detected
    subdifferential element (p~, P~) satisfies p~ = -p and P~ <= -P."""
    name = "superdiff_inclusions"
    seed = check_seed(ctx.seed, name)
    rng = np.random.default_rng(seed)
    p, rec, fld = ctx.problem, ctx.record, ctx.value_field
    b = rec.bundle
    n = p.dim
    common = _common_steps(rec, fld, tail=fld.grid.dt)
    chosen = _sample(rng, range(len(common)), min(sample_times, ctx.sample_times))
    reach = max(radii) * math.sqrt(2.0)
    worst = (-np.inf, 0.0, {})
    powerless, sub_found, evaluated = 0, 0, 0
    for j in chosen:
        i, t = common[j]
        inside = _interior_rows(fld, b.states[:, i], reach)
        if inside.size == 0:
            continue
        row = int(rng.choice(inside))
        x, _, pv, _, Pm, _, _ = rec.septuple(i, np.array([row]))
        x, pv, Pm = x[0], pv[0], Pm[0]
        errors = (0.0, float(np.linalg.norm(rec.adjoint.stderr_p[i])), float(rec.second.stderr_P[i]))
        evaluated += 1
        for kappa in (0.0,) + tuple(kappas):
            rep = superdiff_membership(fld, t, x, (0.0, -pv, -Pm + kappa * np.eye(n)), radii, errors=errors)
            excess = max(rep.margin - rep.tolerance, rep.trend - rep.tolerance)
            if excess > worst[0]:
                worst = (excess, rep.tolerance, {"test": f"(-p, -P + {kappa} I)", "time": t,
                                                 "path": int(b.path_ids[row]), "margin": rep.margin,
                                                 "rungs": rep.rungs})
        neg = superdiff_membership(fld, t, x, (0.0, -pv + shift, -Pm), radii, errors=errors)
        powerless += int(neg.accepted)
        d = numeric_differentials(fld, t, x)
        sub = subdiff_membership(fld, t, x, (d.v_x, d.v_xx), radii, errors=(0.0, float(np.max(d.err_x)),
                                                                               float(np.max(d.err_xx))))
        if sub.accepted:
            sub_found += 1
            tol_p = (rel_tol * max(float(np.linalg.norm(pv)), floor)
                     + ctx.tolerance_scale * (float(np.linalg.norm(d.err_x)) + errors[1]))
            tol_P = (rel_tol * max(float(np.linalg.norm(Pm, 2)), floor)
                     + ctx.tolerance_scale * (float(np.max(d.err_xx)) + errors[2]))
            gap_p = float(np.linalg.norm(d.v_x + pv)) - tol_p
            gap_P = float(np.max(np.linalg.eigvalsh(d.v_xx + Pm))) - tol_P
            for label, excess, tol in (("p~ = -p", gap_p, tol_p), ("P~ <= -P", gap_P, tol_P)):
                if excess > worst[0]:
                    worst = (excess, tol, {"test": label, "time": t, "path": int(b.path_ids[row]),
                                           "margin": excess + tol})
    if evaluated == 0:
        return _result(name, True, 0.0, 0.0, seed, {}, {"reason": "no interior sample points"}, inconclusive=True)
    excess, tol, witness = worst
    return _result(name, excess <= 0.0, witness["margin"], tol, seed, witness,
                   {"sense": "<= tolerance", "points": evaluated, "negative_control_accepted": powerless,
                    "subdifferential_elements": sub_found}, inconclusive=powerless > 0)


# ---------- time-variable inclusion ----------

def check_time_inclusion(ctx: CheckContext, rel_tol: float = 0.05, sample_times: int = 10,
                         shift: float = 0.1, floor: float = 0.1, lags: Sequence[int] = (1, 2, 4, 8)) -> CheckResult:
    """<<A X, p>> + calH(t, X, u) in D_{t+}^{1,+} V(t, X(t)), calH = G(t,X,u,p,P) + <b, q - P b>.

    The details also carry the fitted order of E sup|xi_tau|^2 in tau - t at the first quarter of the
    horizon (about 1 when the time variation is O(tau - t)).
    """
    name = "time_inclusion"
    seed = check_seed(ctx.seed, name)
    rng = np.random.default_rng(seed)
    p, rec, fld = ctx.problem, ctx.record, ctx.value_field
    b = rec.bundle
    op = p.operator
    c = p.coefficients
    dt = fld.grid.dt
    common = _common_steps(rec, fld, tail=4 * dt)
    chosen = _sample(rng, range(len(common)), min(sample_times, ctx.sample_times))
    h = 2.0 * fld.spacing()
    worst = (-np.inf, 0.0, {})
    pairing_defect, powerless, evaluated = 0.0, 0, 0
    for j in chosen:
        i, t = common[j]
        inside = _interior_rows(fld, b.states[:, i], 2 * h)
        if inside.size == 0:
            continue
        row = int(rng.choice(inside))
        x, u, pv, qv, Pm, _, _ = rec.septuple(i, np.array([row]))
        evaluated += 1
        ax_p = float(op.generator_apply(x[0]) @ pv[0])
        x_asp = float(x[0] @ op.generator_adjoint_apply(pv[0]))
        pairing_defect = max(pairing_defect, abs(ax_p - x_asp) / (1.0 + abs(ax_p)))
        bb = c.b(t, x, u)
        calH = float(hamiltonian_G(p, t, x, u, pv, Pm)[0]
                     + np.einsum("il,il->", bb[0], qv[0] - Pm[0] @ bb[0]))
        r = ax_p + calH
        se_r = ctx.tolerance_scale * (float(np.linalg.norm(rec.adjoint.stderr_p[i])) * (1.0 + float(np.linalg.norm(x)))
                                      + float(np.linalg.norm(rec.adjoint.stderr_q[min(i, b.steps - 1)]))
                                      + float(rec.second.stderr_P[i]))
        d = numeric_differentials(fld, t, x[0], h=h)
        tests = []
        rep = time_superdiff_membership(fld, t, x[0], r, err_r=se_r)
        tests.append(("ladder", max(rep.margin, rep.trend) - rep.tolerance, rep.tolerance, rep.margin))
        tol_b = ctx.tolerance_scale * d.err_t + se_r
        tests.append(("r >= V_t+", d.v_t - r - tol_b, tol_b, d.v_t - r))
        if ctx.smooth:
            r_smooth = float(op.generator_apply(x[0]) @ (-d.v_x)
                             + hamiltonian_G(p, t, x, u, -d.v_x[None], -d.v_xx[None])[0])
            scale_terms = (abs(d.v_t), abs(float(c.f(t, x, u)[0])), abs(float(c.a(t, x, u)[0] @ d.v_x)))
            denom = max(max(scale_terms), floor)
            err_s = abs(r_smooth - d.v_t) / denom
            tol_s = rel_tol + ctx.tolerance_scale * (d.err_t + float(np.max(d.err_x)) + float(np.max(d.err_xx))) / denom
            tests.append(("smooth V_t", err_s - tol_s, tol_s, err_s))
        neg = time_superdiff_membership(fld, t, x[0], d.v_t - shift)
        powerless += int(neg.accepted)
        for label, excess, tol, margin in tests:
            if excess > worst[0]:
                worst = (excess, tol, {"test": label, "time": t, "path": int(b.path_ids[row]), "margin": margin,
                                       "candidate": r})
    if evaluated == 0:
        return _result(name, True, 0.0, 0.0, seed, {}, {"reason": "no interior sample points"}, inconclusive=True)
    excess, tol, witness = worst
    ok = excess <= 0.0 and pairing_defect <= 1e-12
    if pairing_defect > 1e-12:
        witness = {**witness, "pairing_defect": pairing_defect}
    # informational: E sup|xi_tau|^2 should scale like tau - t
    try:
        _, order = time_variation_ladder(p, b, float(b.times[b.steps // 4]), lags)
    except ValueError as e:
        logger.info(f"time_inclusion: no time-variation ladder ({e})")
        order = float("nan")
    return _result(name, ok, witness["margin"], tol, seed, witness,
                   {"sense": "<= tolerance", "points": evaluated, "pairing_defect": pairing_defect,
                    "negative_control_accepted": powerless, "time_variation_order": order},
                   inconclusive=powerless > 0)


# ---------- regularity of the value ----------

def _lipschitz_fit(fld: ValueField, times: Sequence[float], pts: np.ndarray, dirs: np.ndarray, delta: float) -> float:
    worst = 0.0
    for t in times:
        dv = np.abs(fld.value(t, pts + delta * dirs) - fld.value(t, pts))
        worst = max(worst, float(np.max(dv)) / delta)
    return worst


def _holder_fit(fld: ValueField, steps: Sequence[int], pts: np.ndarray, lag: int) -> float:
    worst = 0.0
    tau = lag * fld.grid.dt
    for k in steps:
        if k + lag > fld.grid.steps:
            continue
        t = float(fld.times[k])
        dv = np.abs(fld.value(t + tau, pts) - fld.value(t, pts))
        worst = max(worst, float(np.max(dv)) / math.sqrt(tau))
    return worst


def check_value_regularity(ctx: CheckContext, delta: Optional[float] = None, points: int = 200,
                           stability: float = 1.2) -> CheckResult:
    """Spatial Lipschitz, time Hoelder-1/2 and linear-growth constants; stable when halving the offset
    scale (for growth: doubling the sample density) does not raise a fitted constant by more than 20%."""
    name = "value_regularity"
    seed = check_seed(ctx.seed, name)
    rng = np.random.default_rng(seed)
    fld = ctx.value_field
    n = fld.dim
    if fld.grid.steps < 1:
        raise ValueError("value regularity needs a field with at least two times")
    delta = delta or 10.0 * fld.spacing()
    if fld.kind == "grid":
        lo = np.array([a[0] for a in fld.axes]) + delta
        hi = np.array([a[-1] for a in fld.axes]) - delta
    else:
        cloud = np.concatenate(fld.clouds)
        lo, hi = np.quantile(cloud, 0.05, axis=0), np.quantile(cloud, 0.95, axis=0)
    pts = rng.uniform(lo, hi, size=(points, n))
    dirs = rng.normal(size=(points, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    steps = _sample(rng, range(fld.grid.steps), 10)
    times = [float(fld.times[k]) for k in steps]
    lip = (_lipschitz_fit(fld, times, pts, dirs, delta), _lipschitz_fit(fld, times, pts, dirs, delta / 2))
    lag = max(2, int(round(0.04 / fld.grid.dt)))
    hold = (_holder_fit(fld, steps, pts, lag), _holder_fit(fld, steps, pts, lag // 2))
    dense = np.concatenate([pts, rng.uniform(lo, hi, size=(points, n))])

    def growth_fit(cloud):
        return max(float(np.max(np.abs(fld.value(t, cloud)) / (1.0 + np.linalg.norm(cloud, axis=1)))) for t in times)

    growth = (growth_fit(pts), growth_fit(dense))

    def ratio(pair):
        coarse, fine = pair
        if fine <= 1e-12:
            return 0.0
        return fine / max(coarse, 1e-12)

    ratios = {"lipschitz": ratio(lip), "holder": ratio(hold), "growth": ratio(growth)}
    finite = all(np.isfinite(v) for v in (*lip, *hold, *growth))
    worst = max(ratios.values())
    key = max(ratios, key=ratios.get)
    return _result(name, finite and worst <= stability, worst, stability, seed, {"constant": key},
                   {"sense": "<= tolerance", "lipschitz": lip, "holder": hold, "growth": growth,
                    "delta": delta})


# ---------- dynamic programming ----------

class SwitchPolicy(ControlPolicy):
    """`first` before the global step `switch`, `second` from it on."""

    def __init__(self, first: ControlPolicy, second: ControlPolicy, switch: int):
        self.first, self.second, self.switch = first, second, switch

    def __call__(self, i, t, x, paths):
        return (self.first if i < self.switch else self.second)(i, t, x, paths)


def splicing_gap(p: SpectralProblem, fld: ValueField, t: float, t_hat: float, tail: ControlPolicy,
                 paths: int, stream: int, basis: RegressionBasis = RegressionBasis()) -> Dict[str, float]:
    """J(t, eta; u1 on [t, t_hat) then u2) against G_{t,t_hat}[E(J(t_hat, X(t_hat); u2) | X(t_hat))]."""
    grid = fld.grid
    i1 = grid.index_of(t_hat)
    i0 = grid.index_of(t)
    policy = SwitchPolicy(FieldPolicy(fld), tail, i1)
    bundle = simulate_state(p, (t, p.initial), policy, paths, stream=stream, grid=grid)
    lhs, se_lhs = cost_functional(p, bundle)
    rest = bundle.window(i1 - i0)
    to_go = path_costs(p, rest)
    proj = basis.fit(rest.states[:, 0], rest.first_step)
    cond, se_reg = proj.project(to_go)
    per_path = backward_evaluator(p, bundle.window(0, i1 - i0), cond, t, t_hat, basis=basis)
    rhs = float(np.mean(per_path))
    se_diff = float(np.std(path_costs(p, bundle) - per_path, ddof=1) / math.sqrt(paths))
    return {"lhs": lhs, "rhs": rhs, "gap": abs(lhs - rhs), "stderr": float(se_reg) + se_diff, "se_lhs": se_lhs}


def martingale_increments(p: SpectralProblem, fld: ValueField, t: float, lag: int, branches: int, roots: int = 4,
                          stream: int = 0) -> Dict[str, float]:
    """Mean increment of V(r, X(r)) + int_t^r f over branched sub-paths of the field policy, worst root."""
    grid = fld.grid
    policy = FieldPolicy(fld)
    base = simulate_state(p, (grid.t0, p.initial), policy, roots, stream=stream, grid=grid)
    worst = {"increment": 0.0, "stderr": 0.0, "bias": 0.0, "root": -1}
    for path in base.path_ids:
        sub = branch_bundle(p, base, t, int(path), policy, branches)
        k = min(lag, sub.steps)
        w = sub.window(0, k)
        running = path_costs(p, w) - p.coefficients.h(w.states[:, -1])
        t_end = float(w.times[-1])
        x0, x1 = w.states[:1, 0], w.states[:, -1]
        inc = running + fld.value(t_end, x1) - fld.value(t, x0)[0]
        se = float(np.std(inc, ddof=1) / math.sqrt(branches)) if branches > 1 else 0.0
        bias = float(fld.read_error(t, x0)[0] + np.mean(fld.read_error(t_end, x1))
                     + abs(fld.error(t, x0)[0] - np.mean(fld.error(t_end, x1))))
        mean = abs(float(np.mean(inc)))
        if mean - se - bias > worst["increment"] - worst["stderr"] - worst["bias"] or worst["root"] < 0:
            worst = {"increment": mean, "stderr": se, "bias": bias, "root": int(path)}
    return worst


def check_dpp(ctx: CheckContext, t: Optional[float] = None, t_hat: Optional[float] = None,
              splice_scale: float = 2.0) -> CheckResult:
    """DPP gap at (t, t_hat) under the field's policy, the splicing identity for a switched control and
    zero-mean increments of the value process along branched sub-paths."""
    name = "dpp"
    seed = check_seed(ctx.seed, name)
    p, fld = ctx.problem, ctx.value_field
    t = fld.grid.t0 if t is None else t
    if t_hat is None:
        t_hat = float(fld.times[fld.grid.steps // 2])
    stream = seed % (1 << 30)
    gap = dpp_consistency(p, fld, t, t_hat, paths=ctx.paths, stream=stream, basis=ctx.basis)
    tol_gap = ctx.tolerance_scale * gap.stderr + 1e-12
    mid = p.controls.points[p.controls.size // 2]
    sp = splicing_gap(p, fld, t, t_hat, ConstantPolicy(mid), ctx.paths, stream + 1, ctx.basis)
    tol_sp = splice_scale * sp["stderr"] + 1e-12
    t_mid = float(fld.times[fld.grid.steps // 4])
    mart = martingale_increments(p, fld, t_mid, max(1, fld.grid.steps // 10), ctx.branches, stream=stream + 2)
    tol_mart = ctx.tolerance_scale * mart["stderr"] + mart["bias"] + 1e-12
    ratios = {"dpp_gap": (gap.gap, tol_gap), "splicing": (sp["gap"], tol_sp),
              "martingale": (mart["increment"], tol_mart)}
    key = max(ratios, key=lambda k: ratios[k][0] - ratios[k][1])
    margin, tol = ratios[key]
    return _result(name, all(v <= w for v, w in ratios.values()), margin, tol, seed,
                   {"identity": key, "t": t, "t_hat": t_hat},
                   {"sense": "<= tolerance", "value": gap.lhs, "expectation": gap.rhs, "dpp_stderr": gap.stderr,
                    "splice_lhs": sp["lhs"], "splice_rhs": sp["rhs"], "splice_stderr": sp["stderr"],
                    "martingale_root": mart["root"], "martingale_stderr": mart["stderr"]})


# ---------- transposition identity ----------

def check_transposition(ctx: CheckContext, data_scale: float = 1.0, min_order: float = 0.4) -> CheckResult:
    """Duality identity of (P, Q) on two test families sharing the bundle's noise.

    Zero-drift data start from a unit direction and leave the bundle untouched, so a misscaled P shows
    up at the level of floating point. Random adapted data exercise the Q pairings. Each residual is
    held to tolerance_scale standard errors. With a policy in the context the residual bound is refit
    on coarser steps with proportionally fewer paths and must decay in dt at order >= min_order.
    """
    name = "transposition"
    seed = check_seed(ctx.seed, name)
    p, rec = ctx.problem, ctx.record
    b = rec.bundle
    unit = np.zeros(p.dim)
    unit[0] = 1.0
    families = {
        "zero_drift": TranspositionTestData.zero_drift(b, unit, unit),
        "random": TranspositionTestData.random(b, seed=seed, scale=data_scale),
    }
    worst = (-np.inf, 0.0, {})
    terms = {}
    for label, data in families.items():
        res = transposition_residual(p, b, data, rec.second, adjoint=rec.adjoint)
        tol = ctx.tolerance_scale * res.stderr + 1e-9 * (1.0 + abs(res.lhs))
        terms[label] = res.terms
        if res.residual - tol > worst[0]:
            worst = (res.residual - tol, tol, {"data": label, "lhs": res.lhs, "rhs": res.rhs,
                                               "residual": res.residual, "stderr": res.stderr})
    excess, tol, witness = worst
    ok = excess <= 0.0
    details = {"sense": "<= tolerance", "terms": terms}
    if ctx.policy is not None:
        L, M = b.steps, b.paths
        steps = (max(2, L // 4), max(2, L // 2), L)
        paths = (max(50, M // 4), max(50, M // 2), M)
        frame, order = transposition_convergence(p, ctx.policy, steps, paths, seed=seed % (1 << 20),
                                                 basis=ctx.basis, tolerance_scale=ctx.tolerance_scale,
                                                 data_scale=data_scale)
        details.update({"order": order, "min_order": min_order, "convergence": frame.to_dict("records")})
        if order < min_order:
            ok = False
            witness = {**witness, "order": order}
    return _result(name, ok, witness.get("residual", float("nan")), tol, seed, witness, details)


def transposition_convergence(p: SpectralProblem, policy: ControlPolicy, steps: Sequence[int] = (25, 50, 100),
                              paths: Sequence[int] = (500, 1000, 2000), seed: int = 0,
                              basis: RegressionBasis = RegressionBasis(), tolerance_scale: float = 3.0,
                              data_scale: float = 1.0) -> Tuple[pd.DataFrame, float]:
    """Residual bound max(residual, tolerance_scale * stderr) of the random-data identity per step count,
    with the path count growing like 1/dt; returns the table and the log-log slope against dt."""
    if len(steps) != len(paths) or len(steps) < 2:
        raise ValueError(f"need matching steps and paths with at least two levels, got {steps} and {paths}")
    rows = []
    for L, M in zip(steps, paths):
        grid = TimeGrid(p.grid.t0, p.grid.T, int(L))
        rec = build_optimal_record(p, policy, int(M), basis, stream=seed, grid=grid)
        data = TranspositionTestData.random(rec.bundle, seed=seed, scale=data_scale)
        res = transposition_residual(p, rec.bundle, data, rec.second, adjoint=rec.adjoint)
        rows.append({"steps": int(L), "paths": int(M), "dt": grid.dt, "residual": res.residual,
                     "stderr": res.stderr, "bound": max(res.residual, tolerance_scale * res.stderr)})
    frame = pd.DataFrame(rows)
    slope = float(np.polyfit(np.log(frame["dt"]), np.log(np.maximum(frame["bound"], 1e-300)), 1)[0])
    logger.info(f"transposition_convergence: order {slope:.3g} over steps {list(frame['steps'])}")
    return frame, slope


# ---------- a-priori estimates ----------

def check_apriori(ctx: CheckContext, etas: Optional[Sequence[np.ndarray]] = None, paths: int = 1000,
                  stability: float = 1.2) -> CheckResult:
    """Moment and BSDE constants stable under doubling M and under halving dt, exact partition mixing,
    shrinking value spread."""
    name = "apriori"
    seed = check_seed(ctx.seed, name)
    rng = np.random.default_rng(seed)
    p = ctx.problem
    policy = ctx.policy or ConstantPolicy(p.controls.points[p.controls.size // 2])
    etas = etas or [p.initial, 0.5 * p.initial, np.zeros(p.dim)]
    stream = seed % (1 << 20)
    fine = p.grid.refine(2)
    mom = fit_moment_constant(p, policy, etas, paths, stream=stream)
    bsde = fit_bsde_constant(p, policy, etas, paths, ctx.basis, stream=stream + 203)
    pairs = {
        "moment": (mom, fit_moment_constant(p, policy, etas, 2 * paths, stream=stream + 101)),
        "bsde": (bsde, fit_bsde_constant(p, policy, etas, 2 * paths, ctx.basis, stream=stream + 307)),
        "moment_dt": (mom, fit_moment_constant(p, policy, etas, paths, stream=stream + 601, grid=fine)),
        "bsde_dt": (bsde, fit_bsde_constant(p, policy, etas, paths, ctx.basis, stream=stream + 701, grid=fine)),
    }
    labels = rng.integers(0, 2, size=paths)
    other = ConstantPolicy(p.controls.points[0])
    defect = partition_mixing_defect(p, (p.grid.t0, p.initial), [policy, other], labels, paths, stream=stream + 401)
    _, slope = deterministic_value_spread(p, p.initial, policy, sizes=(100, 1600), batches=8, basis=ctx.basis,
                                          stream=stream + 503)

    def spread(pair):
        a, b = pair
        return max(a, b) / max(min(a, b), 1e-12) if max(a, b) > 1e-12 else 1.0

    ratios = {k: spread(v) for k, v in pairs.items()}
    worst = max(ratios.values())
    ok = worst <= stability and defect == 0.0 and slope < 0.0
    return _result(name, ok, worst, stability, seed,
                   {"constant": max(ratios, key=ratios.get), "partition_defect": defect, "spread_slope": slope},
                   {"sense": "<= tolerance", **pairs})


# ---------- orchestration ----------

CHECKS: Dict[str, Callable[[CheckContext], CheckResult]] = {
    "pmp": check_pmp,
    "smooth_relations": check_smooth_relations,
    "superdiff_inclusions": check_superdiff_inclusions,
    "time_inclusion": check_time_inclusion,
    "value_regularity": check_value_regularity,
    "dpp": check_dpp,
    "transposition": check_transposition,
    "apriori": check_apriori,
}
DEFAULT_CHECKS = ("pmp", "smooth_relations", "superdiff_inclusions", "time_inclusion", "value_regularity")
NEEDS_RECORD = {"pmp", "smooth_relations", "superdiff_inclusions", "time_inclusion", "transposition"}
NEEDS_FIELD = {"smooth_relations", "superdiff_inclusions", "time_inclusion", "value_regularity", "dpp"}


def _timed(name: str, ctx: CheckContext) -> CheckResult:
    t0 = time.perf_counter()
    try:
        res = CHECKS[name](ctx)
    except Exception as e:
        logger.error(f"check {name} raised: {e}")
        res = CheckResult(name, "fail", float("nan"), float("nan"), seed=check_seed(ctx.seed, name),
                          witness={"error": f"{type(e).__name__}: {e}"})
    res.runtime = time.perf_counter() - t0
    return res


def run_checks(ctx: CheckContext, names: Sequence[str] = DEFAULT_CHECKS, n_jobs: int = 1) -> List[CheckResult]:
    """Run the named checks independently (joblib threads); results ordered by name."""
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks {unknown}, expected a subset of {sorted(CHECKS)}")
    missing = [n for n in names if (n in NEEDS_RECORD and ctx.record is None) or (n in NEEDS_FIELD and ctx.value_field is None)]
    if missing:
        raise ValueError(f"checks {missing} need an optimal record and/or a value field")
    results = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(_timed)(n, ctx) for n in names)
    return sorted(results, key=lambda r: r.name)
