
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Any
import logging

import numpy as np

from .spectral import SpectralOperator, TimeGrid, NoiseModel, hs_norm, state_norm

logger = logging.getLogger("pmp_dpp_lab.problem")

FD_STEP = 1e-4


class AssumptionError(ValueError):
    """A coefficient returned a non-finite value at a sampled point."""

    def __init__(self, name: str, point: Dict[str, Any]):
        self.name = name
        self.point = point
        super().__init__(f"non-finite output of {name} at {point}")


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of fn(x) w.r.t. x (M, N); derivative index appended last."""
    cols = []
    for j in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[j] = step
        cols.append((fn(x + e) - fn(x - e)) / (2.0 * step))
    return np.stack(cols, axis=-1)


def fd_hessian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Second central differences; the two derivative indices are appended last."""
    n = x.shape[-1]
    base = fn(x)
    out = np.zeros(base.shape + (n, n))
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = step
        for k in range(j, n):
            ek = np.zeros(n)
            ek[k] = step
            val = (fn(x + ej + ek) - fn(x + ej - ek) - fn(x - ej + ek) + fn(x - ej - ek)) / (4.0 * step * step)
            out[..., j, k] = val
            out[..., k, j] = val
    return out


@dataclass
class CoefficientSet:
    """Coefficients evaluated on batches: t scalar, x (M, N), u (M, d).

    Shapes: a (M, N); b (M, N, m); f, h, g, phi (M,); a_x (M, N, N) with [i, j] = da_i/dx_j;
    b_x (M, N, m, N); f_x, h_x (M, N); a_xx (M, N, N, N); b_xx (M, N, m, N, N); f_xx, h_xx (M, N, N).
    Missing derivatives fall back to central finite differences.
    """

    a: Callable
    b: Callable
    f: Callable
    h: Callable
    g: Optional[Callable] = None
    phi: Optional[Callable] = None
    a_x: Optional[Callable] = None
    b_x: Optional[Callable] = None
    f_x: Optional[Callable] = None
    h_x: Optional[Callable] = None
    a_xx: Optional[Callable] = None
    b_xx: Optional[Callable] = None
    f_xx: Optional[Callable] = None
    h_xx: Optional[Callable] = None
    fd_step: float = FD_STEP

    def driver(self, t, x, y, z, u) -> np.ndarray:
        if self.g is not None:
            return self.g(t, x, y, z, u)
        return self.f(t, x, u)

    def terminal(self, x) -> np.ndarray:
        if self.phi is not None:
            return self.phi(x)
        return self.h(x)

    def jac_a(self, t, x, u):
        if self.a_x is not None:
            return self.a_x(t, x, u)
        return fd_jacobian(lambda y: self.a(t, y, u), x, self.fd_step)

    def jac_b(self, t, x, u):
        if self.b_x is not None:
            return self.b_x(t, x, u)
        return fd_jacobian(lambda y: self.b(t, y, u), x, self.fd_step)

    def grad_f(self, t, x, u):
        if self.f_x is not None:
            return self.f_x(t, x, u)
        return fd_jacobian(lambda y: self.f(t, y, u), x, self.fd_step)

    def grad_h(self, x):
        if self.h_x is not None:
            return self.h_x(x)
        return fd_jacobian(self.h, x, self.fd_step)

    def hess_a(self, t, x, u):
        if self.a_xx is not None:
            return self.a_xx(t, x, u)
        if self.a_x is not None:
            return fd_jacobian(lambda y: self.a_x(t, y, u), x, self.fd_step)
        return fd_hessian(lambda y: self.a(t, y, u), x, self.fd_step)

    def hess_b(self, t, x, u):
        if self.b_xx is not None:
            return self.b_xx(t, x, u)
        if self.b_x is not None:
            return fd_jacobian(lambda y: self.b_x(t, y, u), x, self.fd_step)
        return fd_hessian(lambda y: self.b(t, y, u), x, self.fd_step)

    def hess_f(self, t, x, u):
        if self.f_xx is not None:
            return self.f_xx(t, x, u)
        if self.f_x is not None:
            return fd_jacobian(lambda y: self.f_x(t, y, u), x, self.fd_step)
        return fd_hessian(lambda y: self.f(t, y, u), x, self.fd_step)

    def hess_h(self, x):
        if self.h_xx is not None:
            return self.h_xx(x)
        if self.h_x is not None:
            return fd_jacobian(self.h_x, x, self.fd_step)
        return fd_hessian(self.h, x, self.fd_step)


@dataclass
class ControlSet:
    """Finite control grid {rho_1..rho_K} in R^d with a metric."""

    points: np.ndarray
    metric: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 1:
            raise ValueError("ControlSet needs at least one point")
        self.points = pts

    @classmethod
    def grid(cls, lo: float, hi: float, step: float) -> "ControlSet":
        if step <= 0 or hi < lo:
            raise ValueError(f"invalid control grid lo={lo}, hi={hi}, step={step}")
        n = int(round((hi - lo) / step)) + 1
        return cls(np.round(lo + step * np.arange(n), 12))

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def values(self, idx) -> np.ndarray:
        return self.points[np.asarray(idx, dtype=int)]

    def distance(self, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
        if self.metric is not None:
            return self.metric(u1, u2)
        return np.sqrt(np.sum((np.asarray(u1) - np.asarray(u2)) ** 2, axis=-1))

    def nearest(self, values: np.ndarray) -> np.ndarray:
        """Index of the nearest grid point; lowest index on ties."""
        v = np.asarray(values, dtype=float).reshape(-1, self.dim)
        pts = self.points
        if self.dim == 1 and np.all(np.diff(pts[:, 0]) > 0):
            grid = pts[:, 0]
            hi = np.clip(np.searchsorted(grid, v[:, 0]), 1, max(grid.size - 1, 1))
            lo = hi - 1
            if grid.size == 1:
                return np.zeros(v.shape[0], dtype=int)
            pick_hi = np.abs(grid[hi] - v[:, 0]) < np.abs(v[:, 0] - grid[lo])
            return np.where(pick_hi, hi, lo)
        out = np.empty(v.shape[0], dtype=int)
        for s in range(0, v.shape[0], 4096):
            d = np.sum((v[s:s + 4096, None, :] - pts[None, :, :]) ** 2, axis=-1)
            out[s:s + 4096] = np.argmin(d, axis=1)
        return out

    def index_of(self, values: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Grid index of each value, -1 where the value is not a grid point."""
        v = np.asarray(values, dtype=float).reshape(-1, self.dim)
        idx = self.nearest(v)
        off = np.max(np.abs(self.points[idx] - v), axis=1) > tol
        idx = idx.copy()
        idx[off] = -1
        return idx


@dataclass(frozen=True)
class LQParams:
    alpha: float
    beta: float
    sigma: float
    m_cost: float
    n_cost: float
    gamma: float
    T: float
    delta: float = 0.0


@dataclass
class SpectralProblem:
    name: str
    operator: SpectralOperator
    coefficients: CoefficientSet
    controls: ControlSet
    grid: TimeGrid
    noise: NoiseModel
    initial: Optional[np.ndarray] = None
    box: float = 3.0
    lq: Optional[LQParams] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.initial is None:
            self.initial = np.ones(self.dim)
        self.initial = np.asarray(self.initial, dtype=float).reshape(-1)
        self.check_dimensions()

    @property
    def dim(self) -> int:
        return self.operator.dim

    @property
    def noise_dim(self) -> int:
        return self.noise.noise_dim

    def check_dimensions(self) -> None:
        n, m = self.dim, self.noise_dim
        if self.initial.shape != (n,):
            raise ValueError(f"initial state has shape {self.initial.shape}, expected ({n},)")
        x = np.zeros((2, n))
        u = self.controls.values([0, 0])
        c = self.coefficients
        t = self.grid.t0
        checks = {
            "a": (c.a(t, x, u), (2, n)),
            "b": (c.b(t, x, u), (2, n, m)),
            "f": (c.f(t, x, u), (2,)),
            "h": (c.h(x), (2,)),
            "g": (c.driver(t, x, np.zeros(2), np.zeros((2, m)), u), (2,)),
            "phi": (c.terminal(x), (2,)),
        }
        for name, (val, shape) in checks.items():
            if np.shape(val) != shape:
                raise ValueError(f"coefficient {name} returned shape {np.shape(val)}, expected {shape}")


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    constant: float
    witness: Dict[str, Any] = field(default_factory=dict)


@dataclass
class AssumptionReport:
    mode: str
    samples: int
    checks: List[AssumptionCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> List[AssumptionCheck]:
        return [c for c in self.checks if not c.passed]

    def constant(self, name: str) -> float:
        for c in self.checks:
            if c.name == name:
                return c.constant
        raise KeyError(name)

    def get(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _finite(name: str, val: np.ndarray, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    val = np.asarray(val, dtype=float)
    bad = ~np.isfinite(val.reshape(val.shape[0], -1)).all(axis=1) if val.ndim else ~np.isfinite([val])
    if np.any(bad):
        i = int(np.argmax(bad))
        raise AssumptionError(name, {"t": float(t), "x": x[i].tolist(), "u": u[i].tolist()})
    return val


def _flat_norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v.reshape(v.shape[0], -1) ** 2, axis=1))


def _sample_constants(p: SpectralProblem, samples: int, radius: float, rng: np.random.Generator):
    """Empirical Lipschitz/growth/second-derivative constants on [-radius, radius]^N."""
    c = p.coefficients
    n, m = p.dim, p.noise_dim
    out: Dict[str, tuple] = {}

    def keep(name, ratios, t, x, u):
        i = int(np.argmax(ratios))
        val = float(ratios[i])
        if name not in out or val > out[name][0]:
            out[name] = (val, {"t": float(t), "x": x[i].tolist(), "u": u[i].tolist()})

    chunk = 100
    for start in range(0, samples, chunk):
        k = min(chunk, samples - start)
        t = float(rng.uniform(p.grid.t0, p.grid.T))
        x = rng.uniform(-radius, radius, (k, n))
        x2 = rng.uniform(-radius, radius, (k, n))
        u = p.controls.values(rng.integers(0, p.controls.size, k))
        u2 = p.controls.values(rng.integers(0, p.controls.size, k))
        y, y2 = rng.uniform(-radius, radius, k), rng.uniform(-radius, radius, k)
        z, z2 = rng.uniform(-radius, radius, (k, m)), rng.uniform(-radius, radius, (k, m))
        dx = state_norm(x - x2)

        a1, a2 = _finite("a", c.a(t, x, u), t, x, u), _finite("a", c.a(t, x2, u), t, x2, u)
        keep("lip:a", state_norm(a1 - a2) / dx, t, x, u)
        b1, b2 = _finite("b", c.b(t, x, u), t, x, u), _finite("b", c.b(t, x2, u), t, x2, u)
        keep("lip:b", hs_norm(b1 - b2) / dx, t, x, u)
        f1, f2 = _finite("f", c.f(t, x, u), t, x, u), _finite("f", c.f(t, x2, u), t, x2, u)
        keep("lip:f", np.abs(f1 - f2) / dx, t, x, u)
        h1, h2 = _finite("h", c.h(x), t, x, u), _finite("h", c.h(x2), t, x2, u)
        keep("lip:h", np.abs(h1 - h2) / dx, t, x, u)

        du = p.controls.distance(u, u2)
        moved = du > 0
        if np.any(moved):
            au2 = _finite("a", c.a(t, x, u2), t, x, u2)
            bu2 = _finite("b", c.b(t, x, u2), t, x, u2)
            keep("lip:a_u", np.where(moved, state_norm(a1 - au2) / np.where(moved, du, 1.0), 0.0), t, x, u)
            keep("lip:b_u", np.where(moved, hs_norm(b1 - bu2) / np.where(moved, du, 1.0), 0.0), t, x, u)

        zero = np.zeros((k, n))
        growth = (state_norm(_finite("a", c.a(t, zero, u), t, zero, u))
                  + hs_norm(_finite("b", c.b(t, zero, u), t, zero, u))
                  + np.abs(_finite("f", c.f(t, zero, u), t, zero, u))
                  + np.abs(_finite("h", c.h(zero), t, zero, u)))
        keep("growth", growth, t, zero, u)

        keep("second:a_xx", _flat_norm(_finite("a_xx", c.hess_a(t, x, u), t, x, u)), t, x, u)
        keep("second:b_xx", _flat_norm(_finite("b_xx", c.hess_b(t, x, u), t, x, u)), t, x, u)
        keep("second:f_xx", _flat_norm(_finite("f_xx", c.hess_f(t, x, u), t, x, u)), t, x, u)
        keep("second:h_xx", _flat_norm(_finite("h_xx", c.hess_h(x), t, x, u)), t, x, u)

        g1 = _finite("g", c.driver(t, x, y, z, u), t, x, u)
        g2 = _finite("g", c.driver(t, x2, y2, z2, u), t, x2, u)
        dist = dx + np.abs(y - y2) + state_norm(z - z2)
        keep("bsde:g", np.abs(g1 - g2) / dist, t, x, u)
        p1, p2 = _finite("phi", c.terminal(x), t, x, u), _finite("phi", c.terminal(x2), t, x2, u)
        keep("bsde:phi", np.abs(p1 - p2) / dx, t, x, u)
    return out


def _derivative_checks(p: SpectralProblem, samples: int, radius: float, rng: np.random.Generator,
                       tol: float = 1e-6) -> List[AssumptionCheck]:
    c = p.coefficients
    step = c.fd_step
    k = min(samples, 200)
    t = float(rng.uniform(p.grid.t0, p.grid.T))
    x = rng.uniform(-radius, radius, (k, p.dim))
    u = p.controls.values(rng.integers(0, p.controls.size, k))
    pairs = [
        ("a_x", c.a_x, lambda y: c.a(t, y, u)),
        ("b_x", c.b_x, lambda y: c.b(t, y, u)),
        ("f_x", c.f_x, lambda y: c.f(t, y, u)),
        ("h_x", c.h_x, c.h),
        ("a_xx", c.a_xx, lambda y: c.jac_a(t, y, u)),
        ("b_xx", c.b_xx, lambda y: c.jac_b(t, y, u)),
        ("f_xx", c.f_xx, lambda y: c.grad_f(t, y, u)),
        ("h_xx", c.h_xx, c.grad_h),
    ]
    checks = []
    for name, closed, base in pairs:
        if closed is None:
            continue
        exact = closed(x) if name in ("h_x", "h_xx") else closed(t, x, u)
        approx = fd_jacobian(base, x, step)
        err = np.abs(np.asarray(exact) - approx).reshape(k, -1).max(axis=1)
        scale = 1.0 + np.abs(np.asarray(exact)).reshape(k, -1).max(axis=1)
        ratio = err / scale
        i = int(np.argmax(ratio))
        checks.append(AssumptionCheck(f"deriv:{name}", bool(ratio[i] <= tol), float(err[i]),
                                      {"t": t, "x": x[i].tolist(), "u": u[i].tolist()}))
    return checks


def validate_assumptions(p: SpectralProblem, samples: int = 1000, mode: str = "bounded-box",
                         seed: int = 0, scales=(1.0, 10.0, 100.0), growth_factor: float = 2.0) -> AssumptionReport:
    """Sampled Lipschitz, growth, second-derivative and driver constants, plus closed-form vs finite-difference derivative agreement.

    bounded-box: constants are measured on the declared box and only need to be finite.
    global: constants are measured on a ladder of growing boxes and must not grow by more
    than `growth_factor` from the smallest to the largest box.
    """
    if samples < 100:
        raise ValueError(f"samples must be >= 100, got {samples}")
    if mode not in ("bounded-box", "global"):
        raise ValueError(f"unknown validation mode '{mode}'")
    rng = np.random.default_rng(seed)
    radii = [p.box] if mode == "bounded-box" else [p.box * s for s in scales]
    per_scale = [_sample_constants(p, samples, r, rng) for r in radii]
    report = AssumptionReport(mode=mode, samples=samples)
    for name in per_scale[0]:
        first, _ = per_scale[0][name]
        last, witness = per_scale[-1][name]
        ok = bool(np.isfinite(last))
        if mode == "global":
            ok = ok and last <= growth_factor * first + 1e-12
        report.checks.append(AssumptionCheck(name, ok, last, witness))
    report.checks.extend(_derivative_checks(p, samples, p.box, rng))
    for chk in report.failed():
        logger.warning(f"assumption {chk.name} failed on '{p.name}' ({mode}): constant={chk.constant:.4g} at {chk.witness}")
    logger.info(f"validate_assumptions '{p.name}' mode={mode}: {len(report.checks)} checks, passed={report.passed}")
    return report
