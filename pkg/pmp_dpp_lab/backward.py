
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import pandas as pd
from tqdm import tqdm

from .problem import SpectralProblem
from .regression import RegressionBasis
from .simulate import PathBundle, ControlPolicy, simulate_state

logger = logging.getLogger("pmp_dpp_lab.backward")


@dataclass
class BackwardPair:
    """Y (M, L+1), Z (M, L, m) with per-step regression diagnostics."""

    grid: object
    Y: np.ndarray
    Z: np.ndarray
    stderr: np.ndarray
    condition: np.ndarray

    @property
    def y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    @property
    def y0_stderr(self) -> float:
        return float(self.stderr[0])

    def diagnostics(self) -> pd.DataFrame:
        """time, mean_y, mean_abs_z, condition_number (last row has no Z)."""
        L = self.Z.shape[1]
        mean_abs_z = np.append(np.mean(np.sqrt(np.sum(self.Z ** 2, axis=2)), axis=0), np.nan)
        cond = np.append(self.condition, np.nan)
        return pd.DataFrame({
            "time": self.grid.nodes,
            "mean_y": np.mean(self.Y, axis=0),
            "mean_abs_z": mean_abs_z[: L + 1],
            "condition_number": cond[: L + 1],
        })


@dataclass
class AdjointFirst:
    """p (M, L+1, N), q (M, L, N, m); stderr_p accumulates the per-step regression errors from T."""

    grid: object
    p: np.ndarray
    q: np.ndarray
    stderr_p: np.ndarray
    stderr_q: np.ndarray
    condition: np.ndarray


@dataclass
class ComparisonResult:
    passed: bool
    max_violation: float
    tolerance: float
    witness: Dict[str, float] = field(default_factory=dict)
    gap0: float = 0.0


def path_costs(p: SpectralProblem, bundle: PathBundle) -> np.ndarray:
    """Left-endpoint quadrature of int f plus h(X_T), one value per path."""
    c = p.coefficients
    nodes = bundle.times
    dt = bundle.grid.dt
    running = np.zeros(bundle.paths)
    for i in range(bundle.steps):
        running += c.f(float(nodes[i]), bundle.states[:, i], bundle.controls[:, i]) * dt
    return running + c.h(bundle.states[:, -1])


def cost_functional(p: SpectralProblem, bundle: PathBundle) -> Tuple[float, float]:
    """Monte Carlo cost of the bundle's control and its standard error."""
    costs = path_costs(p, bundle)
    se = float(np.std(costs, ddof=1) / math.sqrt(costs.size)) if costs.size > 1 else 0.0
    return float(np.mean(costs)), se


def solve_bsde(p: SpectralProblem, bundle: PathBundle, g: Optional[Callable] = None, phi: Optional[Callable] = None,
               basis: RegressionBasis = RegressionBasis(), terminal: Optional[np.ndarray] = None,
               progress: bool = False) -> BackwardPair:
    """Explicit regression scheme for dY = -g ds + Z dW, Y(T) = phi(X_T) (or `terminal`).

    Z_i = E[(Y_{i+1} - Yhat) dW_i | X_i] / dt, Y_i = Yhat + g(t_i, X_i, Yhat, Z_i, u_i) dt.
    """
    g = g or p.coefficients.driver
    M, L, m = bundle.paths, bundle.steps, p.noise_dim
    dt = bundle.grid.dt
    nodes = bundle.times
    Y = np.empty((M, L + 1))
    Z = np.empty((M, L, m))
    stderr = np.zeros(L + 1)
    cond = np.ones(L)
    if terminal is not None:
        Y[:, L] = np.broadcast_to(np.asarray(terminal, dtype=float), (M,))
    else:
        Y[:, L] = (phi or p.coefficients.terminal)(bundle.states[:, L])
    steps = range(L - 1, -1, -1)
    for i in (tqdm(steps, desc="bsde", leave=False) if progress else steps):
        x, u, dw = bundle.states[:, i], bundle.controls[:, i], bundle.increments[:, i]
        proj = basis.fit(x, bundle.first_step + i)
        y_hat, se = proj.project(Y[:, i + 1])
        z, _ = proj.project((Y[:, i + 1] - y_hat)[:, None] * dw)
        Z[:, i] = z / dt
        Y[:, i] = y_hat + g(float(nodes[i]), x, y_hat, Z[:, i], u) * dt
        stderr[i] = float(se)
        cond[i] = proj.condition_number
    logger.info(f"solve_bsde: M={M}, L={L}, Y0={np.mean(Y[:, 0]):.6g}, max cond={np.max(cond):.3g}")
    return BackwardPair(bundle.grid, Y, Z, stderr, cond)


def backward_evaluator(p: SpectralProblem, bundle: PathBundle, zeta: np.ndarray, t: float, t_end: float,
                       g: Optional[Callable] = None, basis: RegressionBasis = RegressionBasis()) -> np.ndarray:
    """G_{t, t_end}[zeta]: Y(t) of the BSDE on [t, t_end] with terminal value zeta, per path."""
    i0 = bundle.time_index(t)
    i1 = bundle.time_index(t_end)
    if i1 < i0:
        raise ValueError(f"window end {t_end} precedes start {t}")
    zeta = np.broadcast_to(np.asarray(zeta, dtype=float), (bundle.paths,))
    if i1 == i0:
        return zeta.copy()
    pair = solve_bsde(p, bundle.window(i0, i1), g=g, basis=basis, terminal=zeta)
    return pair.Y[:, 0]


def solve_first_adjoint(p: SpectralProblem, bundle: PathBundle, basis: RegressionBasis = RegressionBasis(),
                        progress: bool = False) -> AdjointFirst:
    """p_i = S(dt)^T [phat + (a_x^T phat + b_x^T q - f_x) dt], p_L = -h_x(X_L)."""
    c = p.coefficients
    M, L, N, m = bundle.paths, bundle.steps, p.dim, p.noise_dim
    dt = bundle.grid.dt
    nodes = bundle.times
    P = np.empty((M, L + 1, N))
    Q = np.empty((M, L, N, m))
    se_p = np.zeros((L + 1, N))
    se_q = np.zeros((L, N, m))
    cond = np.ones(L)
    P[:, L] = -c.grad_h(bundle.states[:, L])
    steps = range(L - 1, -1, -1)
    for i in (tqdm(steps, desc="adjoint-1", leave=False) if progress else steps):
        t = float(nodes[i])
        x, u, dw = bundle.states[:, i], bundle.controls[:, i], bundle.increments[:, i]
        proj = basis.fit(x, bundle.first_step + i)
        p_hat, se = proj.project(P[:, i + 1])
        resid = P[:, i + 1] - p_hat
        q, se2 = proj.project(resid[:, :, None] * dw[:, None, :])
        Q[:, i] = q / dt
        se_q[i] = se2 / dt
        drive = (np.einsum("mij,mi->mj", c.jac_a(t, x, u), p_hat)
                 + np.einsum("milj,mil->mj", c.jac_b(t, x, u), Q[:, i])
                 - c.grad_f(t, x, u))
        P[:, i] = p.operator.apply_adjoint(dt, p_hat + drive * dt)
        se_p[i] = np.sqrt(se ** 2 + se_p[i + 1] ** 2)
        cond[i] = proj.condition_number
    if L >= 2:
        Q[:, L - 1] = Q[:, L - 2]
        se_q[L - 1] = se_q[L - 2]
    logger.info(f"solve_first_adjoint: M={M}, L={L}, mean p0={np.mean(P[:, 0], axis=0)}")
    return AdjointFirst(bundle.grid, P, Q, se_p, se_q, cond)


def comparison_check(p: SpectralProblem, bundle: PathBundle, g1: Callable, g2: Callable, phi1: Callable,
                     phi2: Callable, basis: RegressionBasis = RegressionBasis(), n_sigma: float = 3.0,
                     seed: int = 0) -> ComparisonResult:
    """Monotonicity of Y in (g, phi): Y1 <= Y2 + n_sigma * (se1 + se2) at every node and path."""
    rng = np.random.default_rng(seed)
    nodes = bundle.times
    for i in rng.choice(bundle.steps, size=min(5, bundle.steps), replace=False):
        x, u = bundle.states[:, i], bundle.controls[:, i]
        y = rng.normal(size=bundle.paths)
        z = rng.normal(size=(bundle.paths, p.noise_dim))
        if np.any(g1(float(nodes[i]), x, y, z, u) > g2(float(nodes[i]), x, y, z, u) + 1e-12):
            raise ValueError("comparison_check needs g1 <= g2 on sampled arguments")
    if np.any(phi1(bundle.states[:, -1]) > phi2(bundle.states[:, -1]) + 1e-12):
        raise ValueError("comparison_check needs phi1 <= phi2 on sampled arguments")
    first = solve_bsde(p, bundle, g=g1, phi=phi1, basis=basis)
    second = solve_bsde(p, bundle, g=g2, phi=phi2, basis=basis)
    tol = n_sigma * (first.stderr + second.stderr)
    excess = first.Y - second.Y - tol[None, :]
    k = int(np.argmax(excess))
    path, step = np.unravel_index(k, excess.shape)
    worst = float(excess[path, step])
    result = ComparisonResult(
        passed=worst <= 0.0,
        max_violation=max(worst, 0.0),
        tolerance=float(np.max(tol)),
        witness={"path": int(bundle.path_ids[path]), "step": int(step), "time": float(nodes[step])},
        gap0=second.y0 - first.y0,
    )
    if not result.passed:
        logger.warning(f"comparison violated by {worst:.4g} at path {result.witness['path']}, step {step}")
    return result


# ---------- a-priori estimates ----------

def bsde_moment(pair: BackwardPair) -> float:
    """sup_i E|Y_i|^2 + E sum |Z_i|^2 dt."""
    dt = pair.grid.dt
    return float(np.max(np.mean(pair.Y ** 2, axis=0)) + np.mean(np.sum(pair.Z ** 2, axis=(1, 2)) * dt))


def fit_bsde_constant(p: SpectralProblem, policy: ControlPolicy, etas: Sequence[np.ndarray], paths: int,
                      basis: RegressionBasis = RegressionBasis(), stream: int = 17, grid=None) -> float:
    """Smallest C with sup E|Y|^2 + E int |Z|^2 <= C (1 + |eta|^2) over the given initial states."""
    grid = grid or p.grid
    worst = 0.0
    for k, eta in enumerate(etas):
        eta = np.asarray(eta, dtype=float)
        b = simulate_state(p, (grid.t0, eta), policy, paths, stream=stream + k, grid=grid)
        worst = max(worst, bsde_moment(solve_bsde(p, b, basis=basis)) / (1.0 + float(eta @ eta)))
    return worst


def deterministic_value_spread(p: SpectralProblem, eta: np.ndarray, policy: ControlPolicy,
                               sizes: Sequence[int] = (250, 1000, 4000), batches: int = 8,
                               basis: RegressionBasis = RegressionBasis(), stream: int = 23) -> Tuple[pd.DataFrame, float]:
    """Across-batch spread of the regression estimate of Y(t0) from a deterministic start.

    Returns the table (paths, mean_y0, spread) and the log-log slope of spread against paths.
    """
    rows = []
    for size in sizes:
        y0 = []
        for k in range(batches):
            b = simulate_state(p, (p.grid.t0, eta), policy, size, stream=stream + 1000 * k + size)
            y0.append(solve_bsde(p, b, basis=basis).y0)
        rows.append({"paths": size, "mean_y0": float(np.mean(y0)), "spread": float(np.std(y0, ddof=1))})
    frame = pd.DataFrame(rows)
    slope = float(np.polyfit(np.log(frame["paths"]), np.log(frame["spread"]), 1)[0])
    return frame, slope
