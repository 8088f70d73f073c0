
from __future__ import annotations
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import pandas as pd
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import RegularGridInterpolator
from tqdm import tqdm

from .problem import SpectralProblem, ControlSet
from .regression import RegressionBasis, Projector
from .spectral import TimeGrid
from .simulate import ControlPolicy, ConstantPolicy, simulate_state
from .backward import backward_evaluator

logger = logging.getLogger("pmp_dpp_lab.value")


def gauss_hermite(nodes: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite rule for a standard normal in R^dim: points (J, dim), weights (J,)."""
    z, w = hermegauss(nodes)
    w = w / w.sum()
    pts = np.array(list(product(z, repeat=dim)))
    wts = np.prod(np.array(list(product(w, repeat=dim))), axis=1)
    return pts, wts


def sigma_points(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """+-sqrt(dim) e_l with weight 1/(2 dim); exact for polynomials of degree <= 3 in a standard normal."""
    pts = np.concatenate([np.eye(dim), -np.eye(dim)]) * math.sqrt(dim)
    return pts, np.full(2 * dim, 1.0 / (2 * dim))


def _curvature(values: np.ndarray) -> np.ndarray:
    """Linear-interpolation error bar: |second difference| / 8 summed over axes."""
    out = np.zeros_like(values)
    for d in range(values.ndim):
        if values.shape[d] < 3:
            continue
        sd = np.abs(np.diff(values, 2, axis=d)) / 8.0
        pad = [(0, 0)] * values.ndim
        pad[d] = (1, 1)
        out = out + np.pad(sd, pad, mode="edge")
    return out


def _read_error(values: np.ndarray) -> np.ndarray:
    """Error of node-aligned differences of a multilinear interpolant: |third difference| / 8 summed
    over axes (the second-order part is periodic in the node spacing and cancels)."""
    out = np.zeros_like(values)
    for d in range(values.ndim):
        if values.shape[d] < 4:
            continue
        td = np.abs(np.diff(values, 3, axis=d)) / 8.0
        pad = [(0, 0)] * values.ndim
        pad[d] = (1, 2)
        out = out + np.pad(td, pad, mode="edge")
    return out


def _nearest_on_axis(axis: np.ndarray, v: np.ndarray) -> np.ndarray:
    hi = np.clip(np.searchsorted(axis, v), 1, axis.size - 1)
    lo = hi - 1
    return np.where(np.abs(axis[hi] - v) < np.abs(v - axis[lo]), hi, lo)


@dataclass
class ValueField:
    """Value samples on a time grid.

    grid kind: values over a tensor anchor grid (N <= 2), multilinear interpolation with linear
    extrapolation outside the hull. regression kind: per-time least-squares fits on anchor clouds.
    `stderr` is the accumulated error bar of V; `local_error` the pointwise read error used for
    difference quotients.
    """

    kind: str
    grid: TimeGrid
    controls: ControlSet
    axes: Optional[List[np.ndarray]] = None
    values: Optional[np.ndarray] = None
    stderr: Optional[np.ndarray] = None
    local_error: Optional[np.ndarray] = None
    policy: Optional[np.ndarray] = None
    clouds: Optional[List[np.ndarray]] = None
    projectors: Optional[List[Projector]] = None
    coefs: Optional[List[np.ndarray]] = None
    problem: Optional[SpectralProblem] = None
    extrapolated: float = 0.0
    _interp: Dict[Tuple[str, int], RegularGridInterpolator] = field(default_factory=dict, repr=False)

    @classmethod
    def from_function(cls, fn: Callable[[float, np.ndarray], np.ndarray], grid: TimeGrid,
                      axes: Sequence[np.ndarray], controls: Optional[ControlSet] = None) -> "ValueField":
        """Grid field sampled from fn(t, x) with zero error bars."""
        axes = [np.asarray(a, dtype=float) for a in axes]
        shape = tuple(a.size for a in axes)
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        vals = np.stack([np.asarray(fn(float(t), X)).reshape(shape) for t in grid.nodes])
        zero = np.zeros_like(vals)
        return cls("grid", grid, controls or ControlSet(np.zeros(1)), axes, vals, zero, zero.copy(),
                   np.zeros((grid.steps,) + shape, dtype=int))

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def dim(self) -> int:
        return len(self.axes) if self.kind == "grid" else int(self.clouds[0].shape[1])

    def time_index(self, t: float) -> int:
        return self.grid.index_of(t)

    def floor_index(self, t: float) -> int:
        k = int(math.floor((t - self.grid.t0) / self.grid.dt + 1e-9))
        return min(max(k, 0), self.grid.steps)

    def spacing(self) -> float:
        if self.kind == "grid":
            return float(min(np.min(np.diff(a)) for a in self.axes))
        return 0.05

    def _grid_read(self, name: str, arr: np.ndarray, i: int, x: np.ndarray) -> np.ndarray:
        key = (name, i)
        if key not in self._interp:
            self._interp[key] = RegularGridInterpolator(tuple(self.axes), arr[i], bounds_error=False,
                                                        fill_value=None)
        return self._interp[key](x)

    def _points(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(-1, self.dim)

    def outside(self, x) -> np.ndarray:
        x = self._points(x)
        if self.kind == "grid":
            lo = np.array([a[0] for a in self.axes])
            hi = np.array([a[-1] for a in self.axes])
        else:
            cloud = np.concatenate(self.clouds)
            lo, hi = cloud.min(axis=0), cloud.max(axis=0)
        return np.any((x < lo - 1e-12) | (x > hi + 1e-12), axis=1)

    def value(self, t: float, x) -> np.ndarray:
        i = self.time_index(t)
        x = self._points(x)
        if self.kind == "grid":
            return self._grid_read("value", self.values, i, x)
        return self.projectors[i].predict(self.coefs[i], x)

    def error(self, t: float, x) -> np.ndarray:
        i = self.time_index(t)
        x = self._points(x)
        if self.kind == "grid":
            return self._grid_read("stderr", self.stderr, i, x)
        return np.full(x.shape[0], float(self.stderr[i]))

    def read_error(self, t: float, x) -> np.ndarray:
        i = self.time_index(t)
        x = self._points(x)
        if self.kind == "grid":
            return self._grid_read("local", self.local_error, i, x)
        return np.full(x.shape[0], float(self.local_error[i]))

    def control_index(self, t: float, x) -> np.ndarray:
        """Minimizing control at the last field time <= t (nearest anchor or one-step search)."""
        k = min(self.floor_index(t), self.grid.steps - 1)
        x = self._points(x)
        if self.kind == "grid":
            idx = tuple(_nearest_on_axis(a, x[:, d]) for d, a in enumerate(self.axes))
            return self.policy[k][idx]
        return self._greedy(k, x)[1]

    def _one_step_costs(self, k: int, x: np.ndarray) -> np.ndarray:
        p = self.problem
        t = float(self.grid.nodes[k])
        costs, _ = _control_costs(p, self.controls, t, self.grid.dt, x, sigma_points(p.noise_dim),
                                  lambda z: self.projectors[k + 1].predict(self.coefs[k + 1], z))
        return costs

    def _greedy(self, k: int, x: np.ndarray):
        costs = self._one_step_costs(k, x)
        idx = np.argmin(costs, axis=0)
        return costs[idx, np.arange(x.shape[0])], idx

    def to_frame(self) -> pd.DataFrame:
        """time, x0.., value, stderr, control_index (-1 at the terminal time)."""
        frames = []
        for i, t in enumerate(self.times):
            if self.kind == "grid":
                X = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
                vals = self.values[i].reshape(-1)
                se = self.stderr[i].reshape(-1)
                ctrl = self.policy[i].reshape(-1) if i < self.grid.steps else -np.ones(X.shape[0], dtype=int)
            else:
                X = self.clouds[i]
                vals = self.projectors[i].predict(self.coefs[i], X)
                se = np.full(X.shape[0], float(self.stderr[i]))
                ctrl = self.policy[i] if i < self.grid.steps else -np.ones(X.shape[0], dtype=int)
            data = {"time": np.full(X.shape[0], t)}
            for j in range(X.shape[1]):
                data[f"x{j}"] = X[:, j]
            data.update({"value": vals, "stderr": se, "control_index": ctrl})
            frames.append(pd.DataFrame(data))
        return pd.concat(frames, ignore_index=True)


def _control_costs(p: SpectralProblem, controls: ControlSet, t: float, dt: float, x: np.ndarray, rule,
                   continuation: Callable[[np.ndarray], np.ndarray], extra: Optional[Callable] = None):
    """f dt + E[V(S(dt)(x + a dt + b dW))] for every control (rows) and point (columns)."""
    pts, wts = rule
    K, A, N = controls.size, x.shape[0], p.dim
    X = np.tile(x, (K, 1))
    U = np.repeat(controls.points, A, axis=0)
    c = p.coefficients
    base = X + c.a(t, X, U) * dt
    shocks = np.einsum("anl,jl->jan", c.b(t, X, U), pts) * math.sqrt(dt)
    succ = p.operator.apply(dt, base[None] + shocks).reshape(-1, N)
    cont = wts @ continuation(succ).reshape(len(wts), K * A)
    costs = (c.f(t, X, U) * dt + cont).reshape(K, A)
    aux = None if extra is None else (wts @ extra(succ).reshape(len(wts), K * A)).reshape(K, A)
    return costs, (aux, succ.reshape(len(wts), K, A, N))


def _default_axes(p: SpectralProblem, anchor_step: Optional[float]) -> List[np.ndarray]:
    step = anchor_step or (0.01 if p.dim == 1 else 0.1)
    n = int(round(2 * p.box / step)) + 1
    axis = np.round(-p.box + step * np.arange(n), 12)
    return [axis] * p.dim


def _grid_values(p: SpectralProblem, vgrid: TimeGrid, axes: List[np.ndarray], controls: ControlSet,
                 nodes: int, progress: bool) -> ValueField:
    N = p.dim
    shape = tuple(a.size for a in axes)
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, N)
    L = vgrid.steps
    dt = vgrid.dt
    rule = gauss_hermite(nodes, p.noise_dim)
    V = np.empty((L + 1,) + shape)
    err = np.zeros((L + 1,) + shape)
    local = np.zeros((L + 1,) + shape)
    pol = np.empty((L,) + shape, dtype=int)
    V[L] = p.coefficients.h(X).reshape(shape)
    local[L] = _read_error(V[L])
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    outside = 0.0
    steps = range(L - 1, -1, -1)
    for i in (tqdm(steps, desc="value", leave=False) if progress else steps):
        t = float(vgrid.nodes[i])
        v_next = RegularGridInterpolator(tuple(axes), V[i + 1], bounds_error=False, fill_value=None)
        e_next = RegularGridInterpolator(tuple(axes), err[i + 1] + _curvature(V[i + 1]), bounds_error=False, fill_value=None)
        costs, (errs, succ) = _control_costs(p, controls, t, dt, X, rule, v_next, e_next)
        idx = np.argmin(costs, axis=0)
        cols = np.arange(X.shape[0])
        V[i] = costs[idx, cols].reshape(shape)
        err[i] = errs[idx, cols].reshape(shape)
        local[i] = _read_error(V[i])
        pol[i] = idx.reshape(shape)
        chosen = succ[:, idx, cols]
        outside = max(outside, float(np.mean(np.any((chosen < lo) | (chosen > hi), axis=2))))
    if outside > 0:
        logger.info(f"value grid: up to {100 * outside:.2f}% of successor points extrapolated beyond the anchor hull")
    return ValueField("grid", vgrid, controls, list(axes), V, err, local, pol, problem=p, extrapolated=outside)


def _regression_values(p: SpectralProblem, vgrid: TimeGrid, controls: ControlSet, basis: RegressionBasis,
                       cloud_paths: int, start: np.ndarray, progress: bool, stream: int) -> ValueField:
    mid = controls.points[controls.size // 2]
    pilot = simulate_state(p, (vgrid.t0, start), ConstantPolicy(mid), cloud_paths, stream=stream, grid=vgrid)
    L = vgrid.steps
    clouds = [pilot.states[:, i] for i in range(L + 1)]
    projectors: List[Projector] = [None] * (L + 1)
    coefs: List[np.ndarray] = [None] * (L + 1)
    stderr = np.zeros(L + 1)
    policy: List[np.ndarray] = [None] * L
    projectors[L] = basis.fit(clouds[L], L)
    target = p.coefficients.h(clouds[L])
    coefs[L] = projectors[L].coefficients(target)
    _, stderr[L] = projectors[L].project(target)
    rule = sigma_points(p.noise_dim)
    steps = range(L - 1, -1, -1)
    for i in (tqdm(steps, desc="value", leave=False) if progress else steps):
        t = float(vgrid.nodes[i])
        nxt = i + 1
        costs, _ = _control_costs(p, controls, t, vgrid.dt, clouds[i], rule,
                                  lambda z: projectors[nxt].predict(coefs[nxt], z))
        idx = np.argmin(costs, axis=0)
        target = costs[idx, np.arange(clouds[i].shape[0])]
        projectors[i] = basis.fit(clouds[i], i)
        coefs[i] = projectors[i].coefficients(target)
        _, stderr[i] = projectors[i].project(target)
        policy[i] = idx
    return ValueField("regression", vgrid, controls, values=None, stderr=stderr, local_error=stderr.copy(),
                      policy=policy, clouds=clouds, projectors=projectors, coefs=coefs, problem=p)


def compute_value(p: SpectralProblem, t: Optional[float] = None, anchors: Optional[Sequence[np.ndarray]] = None,
                  steps: Optional[int] = None, controls: Optional[ControlSet] = None, kind: str = "auto",
                  nodes: int = 5, anchor_step: Optional[float] = None, basis: RegressionBasis = RegressionBasis(),
                  cloud_paths: int = 2000, start: Optional[np.ndarray] = None, progress: bool = False,
                  stream: int = 29) -> ValueField:
    """Backward induction over Markov feedback policies on [t, T]:
    V(t_i, x) = min_rho { f dt + E V(t_{i+1}, S(dt)(x + a dt + b dW)) }, lowest index on ties."""
    t = p.grid.t0 if t is None else t
    if steps is None:
        steps = max(1, int(round((p.grid.T - t) / p.grid.dt)))
    vgrid = TimeGrid(t, p.grid.T, steps)
    controls = controls or p.controls
    if kind == "auto":
        kind = "grid" if p.dim <= 2 else "regression"
    if kind == "grid":
        if p.dim > 2:
            raise ValueError(f"grid value fields support dim <= 2, got {p.dim}")
        axes = [np.asarray(a, dtype=float) for a in anchors] if anchors is not None else _default_axes(p, anchor_step)
        field_ = _grid_values(p, vgrid, axes, controls, nodes, progress)
    elif kind == "regression":
        field_ = _regression_values(p, vgrid, controls, basis, cloud_paths,
                                    p.initial if start is None else np.asarray(start, dtype=float), progress, stream)
    else:
        raise ValueError(f"unknown value field kind '{kind}'")
    logger.info(f"compute_value '{p.name}': kind={kind}, steps={steps}, controls={controls.size}")
    return field_


class FieldPolicy(ControlPolicy):
    """Feedback read from a value field's minimizing controls."""

    def __init__(self, field_: ValueField):
        self.field = field_

    def __call__(self, i, t, x, paths):
        return self.field.controls.values(self.field.control_index(t, x))


# ---------- DPP and HJB ----------

@dataclass
class DPPGap:
    gap: float
    stderr: float
    lhs: float
    rhs: float


def dpp_consistency(p: SpectralProblem, field_: ValueField, t: float, t_hat: float, eta=None, paths: int = 4000,
                    stream: int = 31, recursive: bool = False, basis: RegressionBasis = RegressionBasis()) -> DPPGap:
    """|V(t, eta) - E[int_t^t_hat f ds + V(t_hat, X(t_hat))]| along the field's own policy and time grid.

    With `recursive` the inner expectation is the backward evaluator G_{t, t_hat}[V(t_hat, X(t_hat))].
    """
    eta = p.initial if eta is None else np.asarray(eta, dtype=float)
    lhs = float(field_.value(t, eta)[0])
    if t_hat == t:
        return DPPGap(0.0, 0.0, lhs, lhs)
    if t_hat < t:
        raise ValueError(f"t_hat must be >= t, got t={t}, t_hat={t_hat}")
    i0, i1 = field_.time_index(t), field_.time_index(t_hat)
    bundle = simulate_state(p, (t, eta), FieldPolicy(field_), paths, stream=stream, grid=field_.grid)
    sub = bundle.window(0, i1 - i0)
    x_hat = sub.states[:, -1]
    terminal = field_.value(t_hat, x_hat)
    if recursive:
        per_path = backward_evaluator(p, sub, terminal, t, t_hat, basis=basis)
        se_mc = float(np.std(terminal, ddof=1) / math.sqrt(paths))
    else:
        c = p.coefficients
        nodes = sub.times
        running = np.zeros(paths)
        for k in range(sub.steps):
            running += c.f(float(nodes[k]), sub.states[:, k], sub.controls[:, k]) * sub.grid.dt
        per_path = running + terminal
        se_mc = float(np.std(per_path, ddof=1) / math.sqrt(paths))
    rhs = float(np.mean(per_path))
    bias = abs(float(field_.error(t, eta)[0]) - float(np.mean(field_.error(t_hat, x_hat))))
    gap = DPPGap(abs(lhs - rhs), se_mc + bias, lhs, rhs)
    logger.info(f"dpp_consistency: V={lhs:.6g}, E[...]={rhs:.6g}, gap={gap.gap:.3g} (se {gap.stderr:.3g})")
    return gap


def hamiltonian_G(p: SpectralProblem, t: float, x: np.ndarray, rho: np.ndarray, pv: np.ndarray,
                  Pm: np.ndarray) -> np.ndarray:
    """1/2 <P b, b>_{HS} + <p, a> - f, batched over rows."""
    c = p.coefficients
    b = c.b(t, x, rho)
    return (0.5 * np.einsum("mij,mjl,mil->m", Pm, b, b)
            + np.einsum("mi,mi->m", pv, c.a(t, x, rho))
            - c.f(t, x, rho))


@dataclass
class DifferentialEstimate:
    t: float
    x: np.ndarray
    v_t: float
    v_x: np.ndarray
    v_xx: np.ndarray
    err_t: float = 0.0
    err_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    err_xx: np.ndarray = field(default_factory=lambda: np.zeros(0))
    h: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        n = self.x.size
        self.v_x = np.atleast_1d(np.asarray(self.v_x, dtype=float))
        self.v_xx = np.asarray(self.v_xx, dtype=float).reshape(n, n)
        if self.err_x.size == 0:
            self.err_x = np.zeros(n)
        if self.err_xx.size == 0:
            self.err_xx = np.zeros((n, n))

    @property
    def noise_dominated(self) -> Dict[str, bool]:
        return {
            "v_t": bool(self.err_t > abs(self.v_t)),
            "v_x": bool(np.any(self.err_x > np.abs(self.v_x))),
            "v_xx": bool(np.any(self.err_xx > np.abs(self.v_xx))),
        }


def numeric_differentials(field_: ValueField, t: float, x, h: Optional[float] = None,
                          tau: Optional[float] = None) -> DifferentialEstimate:
    """Central differences at h and h/2 with Richardson extrapolation for V_x and V_xx; right
    quotients at tau and 2 tau for V_t+. Error bars combine the Richardson defect and read errors."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    h = h or 2.0 * field_.spacing()
    tau = tau or field_.grid.dt
    if t >= field_.grid.T - 1e-12:
        raise ValueError("right time quotient needs t < T")
    if field_.outside(x)[0]:
        logger.warning(f"numeric_differentials: point {x} outside the anchor hull")
    e = np.eye(n)
    V = lambda pts: field_.value(t, pts)
    v0 = float(V(x)[0])
    noise = float(np.max(field_.read_error(t, x[None, :] + np.concatenate([e, -e]) * h)))

    def first(step):
        return (V(x + step * e) - V(x - step * e)) / (2 * step)

    def second(step):
        out = np.empty((n, n))
        plus, minus = V(x + step * e), V(x - step * e)
        for j in range(n):
            out[j, j] = (plus[j] - 2 * v0 + minus[j]) / step ** 2
            for k in range(j + 1, n):
                pts = np.array([x + step * (e[j] + e[k]), x + step * (e[j] - e[k]),
                                x - step * (e[j] - e[k]), x - step * (e[j] + e[k])])
                vv = V(pts)
                out[j, k] = out[k, j] = (vv[0] - vv[1] - vv[2] + vv[3]) / (4 * step ** 2)
        return out

    d1, d1h = first(h), first(h / 2)
    v_x = (4 * d1h - d1) / 3
    err_x = np.abs(d1h - d1) / 3 + 2 * noise / h
    d2, d2h = second(h), second(h / 2)
    v_xx = (4 * d2h - d2) / 3
    err_xx = np.abs(d2h - d2) / 3 + 16 * noise / h ** 2

    read_t = float(field_.read_error(t, x)[0])
    q1 = (float(field_.value(t + tau, x)[0]) - v0) / tau
    if t + 2 * tau <= field_.grid.T + 1e-12:
        q2 = (float(field_.value(t + 2 * tau, x)[0]) - v0) / (2 * tau)
        v_t = 2 * q1 - q2
        err_t = abs(q1 - q2) + 2 * read_t / tau
    else:
        v_t, err_t = q1, 2 * read_t / tau
    est = DifferentialEstimate(t, x, v_t, v_x, 0.5 * (v_xx + v_xx.T), err_t, err_x, err_xx, h, tau)
    flagged = [k for k, v in est.noise_dominated.items() if v]
    if flagged:
        logger.warning(f"numeric_differentials at t={t:.4g}, x={x}: noise-dominated {flagged}")
    return est


@dataclass
class HJBResidual:
    t: float
    x: np.ndarray
    residual: float
    error_bar: float
    status: str
    control_index: int


def hjb_residual(p: SpectralProblem, field_: ValueField, t: float, x, diff: Optional[DifferentialEstimate] = None,
                 tol: float = 0.05) -> HJBResidual:
    """V_t + <A* V_x, x> + min_rho [1/2 <V_xx b, b> + <V_x, a> + f] at (t, x).

    Same as V_t + <A* V_x, x> - max_rho G(t, x, rho, -V_x, -V_xx), since G(t, x, rho, -V_x, -V_xx)
    = -(1/2 <V_xx b, b> + <V_x, a> + f).
    inconclusive when the propagated derivative error bar exceeds both |residual| and tol.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = diff or numeric_differentials(field_, t, x)
    c = p.coefficients
    K = p.controls.size
    X = np.broadcast_to(x, (K, x.size))
    U = p.controls.points
    a, b, f = c.a(t, X, U), c.b(t, X, U), c.f(t, X, U)
    inner = 0.5 * np.einsum("ij,kjl,kil->k", d.v_xx, b, b) + a @ d.v_x + f
    k = int(np.argmin(inner))
    drift = float(p.operator.generator_adjoint_apply(d.v_x) @ x)
    residual = d.v_t + drift + float(inner[k])
    err = (d.err_t + float(np.abs(p.operator.generator_adjoint_apply(d.err_x)) @ np.abs(x))
           + float(np.max(np.abs(a) @ d.err_x + 0.5 * np.einsum("ij,kjl,kil->k", d.err_xx, np.abs(b), np.abs(b)))))
    if abs(residual) <= tol:
        status = "pass"
    elif err > abs(residual):
        status = "inconclusive"
    else:
        status = "fail"
    return HJBResidual(t, x, residual, err, status, k)


# ---------- super/subdifferential tests ----------

@dataclass
class MembershipReport:
    kind: str
    accepted: bool
    margin: float
    tolerance: float
    rungs: List[float]
    trend: float
    witness: Dict[str, float] = field(default_factory=dict)


def _directions(n: int) -> np.ndarray:
    e = np.eye(n)
    dirs = [e[j] for j in range(n)]
    for j in range(n):
        for k in range(j + 1, n):
            dirs.append((e[j] + e[k]) / math.sqrt(2.0))
            dirs.append((e[j] - e[k]) / math.sqrt(2.0))
    dirs = np.array(dirs)
    return np.concatenate([dirs, -dirs])


def _membership(field_: ValueField, t: float, x, triple, radii, kind: str, tol, errors, sign: float) -> MembershipReport:
    if len(radii) < 2:
        raise ValueError("membership tests need at least two radii")
    radii = sorted(radii, reverse=True)
    r, pv, Pm = triple
    x = np.atleast_1d(np.asarray(x, dtype=float))
    pv = np.atleast_1d(np.asarray(pv, dtype=float))
    Pm = np.asarray(Pm, dtype=float).reshape(x.size, x.size)
    v0 = float(field_.value(t, x)[0])
    dirs = _directions(x.size)
    rungs, worst_at = [], []
    read = float(field_.read_error(t, x)[0])
    for rho in radii:
        if kind == "parabolic":
            steps = max(1, int(round(rho * rho / field_.grid.dt)))
            s = t + steps * field_.grid.dt
            if s > field_.grid.T + 1e-12:
                raise ValueError(f"parabolic offset at radius {rho} leaves the field's time range")
            offs = np.concatenate([np.zeros((1, x.size)), rho * dirs])
            vals = field_.value(s, x + offs)
            read = max(read, float(np.max(field_.read_error(s, x + offs))))
            resid = vals - v0 - r * (s - t) - offs @ pv - 0.5 * np.einsum("ki,ij,kj->k", offs, Pm, offs)
            norm = (s - t) + np.sum(offs ** 2, axis=1)
        else:
            offs = rho * dirs
            vals = field_.value(t, x + offs)
            read = max(read, float(np.max(field_.read_error(t, x + offs))))
            resid = vals - v0 - offs @ pv - 0.5 * np.einsum("ki,ij,kj->k", offs, Pm, offs)
            norm = np.full(offs.shape[0], rho * rho)
        stat = sign * resid / norm
        j = int(np.argmax(stat))
        rungs.append(float(stat[j]))
        worst_at.append(offs[j])
    err_r, err_p, err_P = errors or (0.0, 0.0, 0.0)
    rho_min = radii[-1]
    if tol is None:
        tol = (3.0 * (2.0 * read / rho_min ** 2 + err_p / rho_min + 0.5 * err_P + err_r)
               + 1e-8 * (1.0 + abs(v0)) / rho_min ** 2)
    margin = rungs[-1]
    trend = rungs[-1] - rungs[-2]
    accepted = margin <= tol and trend <= tol
    return MembershipReport(kind, bool(accepted), margin, float(tol), rungs, trend,
                            {"t": float(t), "offset": [float(v) for v in worst_at[-1]]})


def superdiff_membership(field_: ValueField, t: float, x, triple, radii: Sequence[float] = (0.4, 0.2, 0.1),
                         kind: str = "spatial", tol: Optional[float] = None, errors=None) -> MembershipReport:
    """Upper second-order expansion test of (r, p, P) at (t, x).

    spatial: y = x + rho d at frozen t, residual / rho^2; parabolic: (s, y) with s - t ~ rho^2,
    residual / (s - t + |y - x|^2). Accepted when the finest rung is <= tol and does not grow.
    """
    if kind not in ("spatial", "parabolic"):
        raise ValueError(f"unknown membership kind '{kind}'")
    return _membership(field_, t, x, triple, radii, kind, tol, errors, 1.0)


def subdiff_membership(field_: ValueField, t: float, x, pair, radii: Sequence[float] = (0.4, 0.2, 0.1),
                       tol: Optional[float] = None, errors=None) -> MembershipReport:
    """Lower expansion test of (p, P) at frozen t."""
    pv, Pm = pair
    return _membership(field_, t, x, (0.0, pv, Pm), radii, "spatial-sub", tol, errors, -1.0)


def time_superdiff_membership(field_: ValueField, t: float, x, r: float, taus: Optional[Sequence[float]] = None,
                              tol: Optional[float] = None, err_r: float = 0.0) -> MembershipReport:
    """r in D_{t+}^{1,+}: V(s, x) - V(t, x) - r (s - t) <= o(s - t) as s decreases to t."""
    dt = field_.grid.dt
    taus = sorted(taus or (4 * dt, 2 * dt, dt), reverse=True)
    if len(taus) < 2:
        raise ValueError("time membership needs at least two offsets")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v0 = float(field_.value(t, x)[0])
    read = float(field_.read_error(t, x)[0])
    rungs = []
    for tau in taus:
        s = t + tau
        if s > field_.grid.T + 1e-12:
            raise ValueError(f"time offset {tau} leaves the field's time range")
        rungs.append((float(field_.value(s, x)[0]) - v0 - r * tau) / tau)
        read = max(read, float(field_.read_error(s, x)[0]))
    if tol is None:
        tol = 3.0 * (2.0 * read / taus[-1] + err_r) + 1e-8 * (1.0 + abs(v0)) / taus[-1]
    margin = rungs[-1]
    trend = rungs[-1] - rungs[-2]
    return MembershipReport("time", bool(margin <= tol and trend <= tol), margin, float(tol), rungs, trend,
                            {"t": float(t), "tau": float(taus[-1])})
