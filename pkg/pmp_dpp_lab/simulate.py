
from __future__ import annotations
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import pandas as pd

from .spectral import TimeGrid, sample_increments, coarsen_increments, state_norm
from .problem import SpectralProblem

logger = logging.getLogger("pmp_dpp_lab.simulate")

DEFAULT_BRANCHES = 256


class SimulationError(RuntimeError):
    """First non-finite state of a simulation."""

    def __init__(self, path: int, step: int):
        self.path = path
        self.step = step
        super().__init__(f"non-finite state on path {path} at step {step}")


# ---------- control policies ----------

class ControlPolicy:
    """Maps (global step i, time t, current states x, path ids) to control values (M, d).

    Implementations may only read the current state or per-path data fixed in advance.
    """

    def __call__(self, i: int, t: float, x: np.ndarray, paths: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FeedbackPolicy(ControlPolicy):
    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray]):
        self.fn = fn

    def __call__(self, i, t, x, paths):
        u = np.asarray(self.fn(t, x), dtype=float)
        return u.reshape(x.shape[0], -1)


class ConstantPolicy(ControlPolicy):
    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def __call__(self, i, t, x, paths):
        return np.broadcast_to(self.value, (x.shape[0], self.value.size)).copy()


class LinearFeedback(ControlPolicy):
    """u = K(t) x + k0(t); gain is a (d, N) array or a callable of t."""

    def __init__(self, gain, offset=0.0):
        self.gain = gain
        self.offset = offset

    def __call__(self, i, t, x, paths):
        gain = self.gain(t) if callable(self.gain) else self.gain
        gain = np.atleast_2d(np.asarray(gain, dtype=float))
        off = self.offset(t) if callable(self.offset) else self.offset
        return np.einsum("dj,mj->md", gain, x) + np.asarray(off, dtype=float)


class OpenLoopPolicy(ControlPolicy):
    """Precomputed per-path controls; values[k, s] is used at global step first_step + s for the
    k-th path id in path_ids."""

    def __init__(self, values: np.ndarray, first_step: int = 0, path_ids: Optional[np.ndarray] = None):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        self.first_step = first_step
        ids = np.arange(self.values.shape[0]) if path_ids is None else np.asarray(path_ids)
        self._row = {int(pid): k for k, pid in enumerate(ids)}

    @classmethod
    def from_bundle(cls, bundle: "PathBundle") -> "OpenLoopPolicy":
        return cls(bundle.controls, bundle.first_step, bundle.path_ids)

    def __call__(self, i, t, x, paths):
        s = i - self.first_step
        if s < 0 or s >= self.values.shape[1]:
            raise ValueError(f"open-loop controls do not cover step {i}")
        rows = np.fromiter((self._row[int(pid)] for pid in paths), dtype=int, count=len(paths))
        return self.values[rows, s]


class MixedPolicy(ControlPolicy):
    """Per-path selection sum_j 1_{Omega_j} u^j with labels fixed at the start."""

    def __init__(self, policies: Sequence[ControlPolicy], labels: np.ndarray):
        self.policies = list(policies)
        self.labels = np.asarray(labels, dtype=int)
        if self.labels.min() < 0 or self.labels.max() >= len(self.policies):
            raise ValueError("labels must index the policy list")

    def __call__(self, i, t, x, paths):
        outs = [pol(i, t, x, paths) for pol in self.policies]
        u = np.array(outs[0], copy=True)
        for j in range(1, len(outs)):
            sel = self.labels == j
            u[sel] = outs[j][sel]
        return u


# ---------- bundles ----------

@dataclass
class PathBundle:
    grid: TimeGrid
    states: np.ndarray
    increments: np.ndarray
    controls: np.ndarray
    control_index: np.ndarray
    seed: int
    stream: int = 0
    first_step: int = 0
    path_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.path_ids is None:
            self.path_ids = np.arange(self.states.shape[0])

    @property
    def paths(self) -> int:
        return int(self.states.shape[0])

    @property
    def dim(self) -> int:
        return int(self.states.shape[2])

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def initial(self) -> np.ndarray:
        return self.states[:, 0]

    def time_index(self, t: float) -> int:
        return self.grid.index_of(t)

    def window(self, i0: int, i1: Optional[int] = None) -> "PathBundle":
        i1 = self.steps if i1 is None else i1
        return replace(
            self,
            grid=self.grid.window(i0, i1),
            states=self.states[:, i0:i1 + 1],
            increments=self.increments[:, i0:i1],
            controls=self.controls[:, i0:i1],
            control_index=self.control_index[:, i0:i1],
            first_step=self.first_step + i0,
        )

    def subset(self, rows) -> "PathBundle":
        rows = np.asarray(rows)
        return replace(self, states=self.states[rows], increments=self.increments[rows],
                       controls=self.controls[rows], control_index=self.control_index[rows],
                       path_ids=self.path_ids[rows])

    def to_frame(self, max_paths: Optional[int] = None) -> pd.DataFrame:
        """Long table: path, step, time, x0..x{N-1}, control_index (last step repeats -1)."""
        k = self.paths if max_paths is None else min(max_paths, self.paths)
        L = self.steps
        idx = np.concatenate([self.control_index[:k], -np.ones((k, 1), dtype=int)], axis=1)
        data = {
            "path": np.repeat(self.path_ids[:k], L + 1),
            "step": np.tile(np.arange(L + 1) + self.first_step, k),
            "time": np.tile(self.times, k),
        }
        for j in range(self.dim):
            data[f"x{j}"] = self.states[:k, :, j].reshape(-1)
        data["control_index"] = idx.reshape(-1)
        return pd.DataFrame(data)


@dataclass
class VariationBundle:
    base: PathBundle
    t_index: int
    states: np.ndarray
    xi: np.ndarray
    eps_a: np.ndarray
    eps_b: np.ndarray
    eps_tilde_a: np.ndarray
    eps_tilde_b: np.ndarray
    radius: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def summary(self) -> dict:
        dt = self.base.grid.dt
        sq = lambda v: np.sum(v.reshape(v.shape[0], v.shape[1], -1) ** 2, axis=2)
        return {
            "sup_xi2": float(np.mean(np.max(np.sum(self.xi ** 2, axis=2), axis=1))),
            "eps_a2": float(np.mean(np.sum(sq(self.eps_a), axis=1) * dt)),
            "eps_b2": float(np.mean(np.sum(sq(self.eps_b), axis=1) * dt)),
            "eps_tilde_a2": float(np.mean(np.sum(sq(self.eps_tilde_a), axis=1) * dt)),
            "eps_tilde_b2": float(np.mean(np.sum(sq(self.eps_tilde_b), axis=1) * dt)),
        }


# ---------- integration ----------

def _integrate(p: SpectralProblem, grid: TimeGrid, first_step: int, x0: np.ndarray, policy: ControlPolicy,
               dw: np.ndarray, path_ids: np.ndarray):
    """Exponential Euler: X_{i+1} = S(dt)[X_i + a dt + b dW_i]."""
    M, L = dw.shape[0], dw.shape[1]
    N = p.dim
    dt = grid.dt
    nodes = grid.nodes
    states = np.empty((M, L + 1, N))
    states[:, 0] = x0
    controls = None
    c = p.coefficients
    for i in range(L):
        x = states[:, i]
        t = float(nodes[i])
        u = np.asarray(policy(first_step + i, t, x, path_ids), dtype=float).reshape(M, -1)
        if controls is None:
            controls = np.empty((M, L, u.shape[1]))
        controls[:, i] = u
        drift = c.a(t, x, u)
        noise = np.einsum("mnl,ml->mn", c.b(t, x, u), dw[:, i])
        nxt = p.operator.apply(dt, x + drift * dt + noise)
        bad = ~np.isfinite(nxt).all(axis=1)
        if np.any(bad):
            path = int(path_ids[int(np.argmax(bad))])
            logger.error(f"simulation diverged on path {path} at step {first_step + i + 1}")
            raise SimulationError(path, first_step + i + 1)
        states[:, i + 1] = nxt
    return states, controls


def simulate_state(p: SpectralProblem, start: Tuple[float, np.ndarray], policy: ControlPolicy, paths: int,
                   stream: int = 0, first_path: int = 0, increments: Optional[np.ndarray] = None,
                   grid: Optional[TimeGrid] = None) -> PathBundle:
    """Simulate the controlled state from (t, eta) on [t, T] of the problem grid (or `grid`).

    Increments default to the problem's noise on the full grid, sliced from t, so windows of one
    path id always see the same Brownian path.
    """
    base = p.grid if grid is None else grid
    t, eta = start
    i0 = base.index_of(t)
    window = base.window(i0)
    if increments is None:
        dw = sample_increments(p.noise, base, paths, stream, first_path)[:, i0:]
    else:
        dw = np.asarray(increments, dtype=float)
        if dw.shape != (paths, window.steps, p.noise_dim):
            raise ValueError(f"increments have shape {dw.shape}, expected {(paths, window.steps, p.noise_dim)}")
    x0 = np.broadcast_to(np.asarray(eta, dtype=float), (paths, p.dim))
    ids = np.arange(first_path, first_path + paths)
    states, controls = _integrate(p, window, i0, x0, policy, dw, ids)
    bundle = PathBundle(window, states, dw, controls, p.controls.nearest(controls.reshape(-1, controls.shape[2]))
                        .reshape(paths, window.steps), p.noise.seed, stream, i0, ids)
    logger.info(f"simulate_state '{p.name}': M={paths}, L={window.steps}, N={p.dim}, t0={t:.4g}")
    return bundle


def frozen_linearization(p: SpectralProblem, bundle: PathBundle) -> Tuple[np.ndarray, np.ndarray]:
    """J = a_x and K = b_x along the stored trajectory, shapes (M, L, N, N) and (M, L, N, m, N)."""
    c = p.coefficients
    nodes = bundle.times
    J = np.stack([c.jac_a(float(nodes[i]), bundle.states[:, i], bundle.controls[:, i])
                  for i in range(bundle.steps)], axis=1)
    K = np.stack([c.jac_b(float(nodes[i]), bundle.states[:, i], bundle.controls[:, i])
                  for i in range(bundle.steps)], axis=1)
    return J, K


def simulate_test_process(p: SpectralProblem, bundle: PathBundle, J: np.ndarray, K: np.ndarray, xi: np.ndarray,
                          u_proc: Optional[np.ndarray] = None, v_proc: Optional[np.ndarray] = None) -> PathBundle:
    """d phi = ((A + J) phi + u) ds + (K phi + v) dW on the bundle's noise, phi(t) = xi."""
    M, L, N, m = bundle.paths, bundle.steps, p.dim, p.noise_dim
    J = np.asarray(J, dtype=float)
    K = np.asarray(K, dtype=float)
    if J.shape[-2:] != (N, N) or K.shape[-3:] != (N, m, N):
        raise ValueError(f"J must be (..., {N}, {N}) and K (..., {N}, {m}, {N}); got J {J.shape}, K {K.shape}")
    J = np.broadcast_to(J, (M, L, N, N))
    K = np.broadcast_to(K, (M, L, N, m, N))
    u_proc = np.zeros((M, L, N)) if u_proc is None else np.broadcast_to(u_proc, (M, L, N))
    v_proc = np.zeros((M, L, N, m)) if v_proc is None else np.broadcast_to(v_proc, (M, L, N, m))
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (M, N))
    dt = bundle.grid.dt
    phi = np.empty((M, L + 1, N))
    phi[:, 0] = xi
    for i in range(L):
        y = phi[:, i]
        drift = np.einsum("mij,mj->mi", J[:, i], y) + u_proc[:, i]
        diff = np.einsum("milj,mj->mil", K[:, i], y) + v_proc[:, i]
        phi[:, i + 1] = p.operator.apply(dt, y + drift * dt + np.einsum("mil,ml->mi", diff, bundle.increments[:, i]))
    return replace(bundle, states=phi)


def _remainders(p: SpectralProblem, base: PathBundle, i0: int, xz: np.ndarray):
    c = p.coefficients
    nodes = base.times
    L = base.steps - i0
    xi = xz - base.states[:, i0:]
    eps_a, eps_b, eps_ta, eps_tb = [], [], [], []
    for s in range(L):
        k = i0 + s
        t = float(nodes[k])
        xb, u, d = base.states[:, k], base.controls[:, k], xi[:, s]
        ea = c.a(t, xz[:, s], u) - c.a(t, xb, u) - np.einsum("mij,mj->mi", c.jac_a(t, xb, u), d)
        eb = c.b(t, xz[:, s], u) - c.b(t, xb, u) - np.einsum("milj,mj->mil", c.jac_b(t, xb, u), d)
        eps_a.append(ea)
        eps_b.append(eb)
        eps_ta.append(ea - 0.5 * np.einsum("mijk,mj,mk->mi", c.hess_a(t, xb, u), d, d))
        eps_tb.append(eb - 0.5 * np.einsum("miljk,mj,mk->mil", c.hess_b(t, xb, u), d, d))
    return xi, np.stack(eps_a, 1), np.stack(eps_b, 1), np.stack(eps_ta, 1), np.stack(eps_tb, 1)


def simulate_variation(p: SpectralProblem, bundle: PathBundle, t: float, z: np.ndarray) -> VariationBundle:
    """Restart the optimal controls from x^z(t) = z on the bundle's noise; xi^z = x^z - X(t) and the
    first/second-order expansion remainders of a and b along [t, T]."""
    i0 = bundle.time_index(t)
    z = np.broadcast_to(np.asarray(z, dtype=float), (bundle.paths, p.dim)).copy()
    far = np.abs(z) > p.box
    if np.any(far):
        logger.warning(f"simulate_variation: {int(np.any(far, axis=1).sum())} start points outside the box {p.box}")
    window = bundle.grid.window(i0)
    policy = OpenLoopPolicy.from_bundle(bundle)
    xz, _ = _integrate(p, window, bundle.first_step + i0, z, policy, bundle.increments[:, i0:], bundle.path_ids)
    xi, ea, eb, eta, etb = _remainders(p, bundle, i0, xz)
    return VariationBundle(bundle, i0, xz, xi, ea, eb, eta, etb, state_norm(z - bundle.states[:, i0]))


def simulate_time_variation(p: SpectralProblem, bundle: PathBundle, t: float, tau: float) -> VariationBundle:
    """Start the optimal dynamics at tau >= t from X(t): xi_tau = x_tau - X on [tau, T]."""
    if tau < t:
        raise ValueError(f"tau must be >= t, got t={t}, tau={tau}")
    i = bundle.time_index(t)
    return simulate_variation(p, bundle, tau, bundle.states[:, i])


def time_variation_ladder(p: SpectralProblem, bundle: PathBundle, t: float,
                          lags: Sequence[int] = (1, 2, 4, 8)) -> Tuple[pd.DataFrame, float]:
    """E sup|xi_tau|^2 for tau = t + lag * dt and the log-log slope against tau - t (1 for O(tau - t))."""
    i = bundle.time_index(t)
    lags = [k for k in lags if 0 < k and i + k < bundle.steps]
    if len(lags) < 2:
        raise ValueError(f"need two lags inside the bundle after t={t}, got {len(lags)}")
    rows = []
    for k in lags:
        vb = simulate_time_variation(p, bundle, t, float(bundle.times[i + k]))
        rows.append({"lag": k * bundle.grid.dt, "sup_xi2": vb.summary()["sup_xi2"]})
    frame = pd.DataFrame(rows)
    frame["constant"] = frame["sup_xi2"] / frame["lag"]
    vals = frame["sup_xi2"].to_numpy()
    slope = float(np.polyfit(np.log(frame["lag"]), np.log(vals), 1)[0]) if np.all(vals > 0) else float("inf")
    return frame, slope


def variation_ladder(p: SpectralProblem, bundle: PathBundle, t: float, radii: Sequence[float],
                     direction: Optional[np.ndarray] = None) -> Tuple[pd.DataFrame, dict]:
    """Remainder magnitudes for z = X(t) + r * direction and log-log slopes against r."""
    i = bundle.time_index(t)
    d = np.ones(p.dim) if direction is None else np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    rows = []
    for r in radii:
        vb = simulate_variation(p, bundle, t, bundle.states[:, i] + r * d)
        rows.append({"radius": float(r), **vb.summary()})
    frame = pd.DataFrame(rows)
    slopes = {}
    lr = np.log(frame["radius"].to_numpy())
    for col in ("sup_xi2", "eps_a2", "eps_b2"):
        vals = frame[col].to_numpy()
        slopes[col] = float(np.polyfit(lr, np.log(vals), 1)[0]) if np.all(vals > 0) else float("inf")
    return frame, slopes


def branch_stream(step: int, path: int) -> int:
    return (1 << 40) + (int(step) << 20) + int(path)


def branch_bundle(p: SpectralProblem, bundle: PathBundle, t: float, path: int, policy: ControlPolicy,
                  branches: int = DEFAULT_BRANCHES) -> PathBundle:
    """Fresh sub-paths from (t, X(t, omega)) on a stream owned by (step, path)."""
    i = bundle.time_index(t)
    row = int(np.flatnonzero(bundle.path_ids == path)[0])
    window = bundle.grid.window(i)
    stream = branch_stream(bundle.first_step + i, path)
    dw = sample_increments(p.noise, window, branches, stream)
    x0 = np.broadcast_to(bundle.states[row, i], (branches, p.dim))
    ids = np.arange(branches)
    states, controls = _integrate(p, window, bundle.first_step + i, x0, policy, dw, ids)
    return PathBundle(window, states, dw, controls,
                      p.controls.nearest(controls.reshape(-1, controls.shape[2])).reshape(branches, window.steps),
                      p.noise.seed, stream, bundle.first_step + i, ids)


def strong_order_study(p: SpectralProblem, policy: ControlPolicy, levels: int = 4, paths: int = 2000,
                       base_steps: Optional[int] = None, stream: int = 7) -> Tuple[pd.DataFrame, float]:
    """Strong error at T of grids with 2^k coarsening against the finest grid on one Brownian path."""
    base = base_steps or p.grid.steps
    fine = TimeGrid(p.grid.t0, p.grid.T, base * 2 ** levels)
    dw = sample_increments(p.noise, fine, paths, stream)
    ids = np.arange(paths)
    x0 = np.broadcast_to(p.initial, (paths, p.dim))
    ref, _ = _integrate(p, fine, 0, x0, policy, dw, ids)
    rows = []
    for k in range(1, levels + 1):
        factor = 2 ** k
        grid = TimeGrid(p.grid.t0, p.grid.T, fine.steps // factor)
        xs, _ = _integrate(p, grid, 0, x0, policy, coarsen_increments(dw, factor), ids)
        err = math.sqrt(float(np.mean(np.sum((xs[:, -1] - ref[:, -1]) ** 2, axis=1))))
        rows.append({"dt": grid.dt, "steps": grid.steps, "strong_error": err})
    frame = pd.DataFrame(rows)
    slope = float(np.polyfit(np.log(frame["dt"]), np.log(frame["strong_error"]), 1)[0])
    logger.info(f"strong_order_study '{p.name}': slope={slope:.3f} over {levels} levels")
    return frame, slope


# ---------- a-priori estimates ----------

def fit_moment_constant(p: SpectralProblem, policy: ControlPolicy, etas: Sequence[np.ndarray], paths: int,
                        stream: int = 11, grid: Optional[TimeGrid] = None) -> float:
    """Smallest C with sup_s E|X(s)|^2 <= C (1 + |eta|^2) over the given initial states."""
    grid = grid or p.grid
    worst = 0.0
    for k, eta in enumerate(etas):
        eta = np.asarray(eta, dtype=float)
        b = simulate_state(p, (grid.t0, eta), policy, paths, stream=stream + k, grid=grid)
        moment = float(np.max(np.mean(np.sum(b.states ** 2, axis=2), axis=0)))
        worst = max(worst, moment / (1.0 + float(eta @ eta)))
    return worst


def stability_ratio(p: SpectralProblem, eta1, eta2, policy1: ControlPolicy, policy2: ControlPolicy,
                    paths: int, stream: int = 13) -> float:
    """E sup|X1 - X2|^2 / (|eta1 - eta2|^2 + E int d(u1, u2)^2 ds) on shared noise."""
    b1 = simulate_state(p, (p.grid.t0, eta1), policy1, paths, stream=stream)
    b2 = simulate_state(p, (p.grid.t0, eta2), policy2, paths, stream=stream)
    num = float(np.mean(np.max(np.sum((b1.states - b2.states) ** 2, axis=2), axis=1)))
    du = p.controls.distance(b1.controls, b2.controls) ** 2
    den = float(np.sum((np.asarray(eta1, dtype=float) - np.asarray(eta2, dtype=float)) ** 2)) \
        + float(np.mean(np.sum(du, axis=1) * b1.grid.dt))
    return 0.0 if den == 0.0 else num / den


def partition_mixing_defect(p: SpectralProblem, start: Tuple[float, np.ndarray], policies: Sequence[ControlPolicy],
                            labels: np.ndarray, paths: int, stream: int = 0) -> float:
    """max |X(sum 1_{Omega_j} u^j) - sum 1_{Omega_j} X(u^j)| over all paths and nodes (0 on shared noise)."""
    labels = np.asarray(labels, dtype=int)
    mixed = simulate_state(p, start, MixedPolicy(policies, labels), paths, stream=stream)
    spliced = np.empty_like(mixed.states)
    for j, pol in enumerate(policies):
        b = simulate_state(p, start, pol, paths, stream=stream)
        sel = labels == j
        spliced[sel] = b.states[sel]
    return float(np.max(np.abs(mixed.states - spliced)))
