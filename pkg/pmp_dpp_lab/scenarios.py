
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Any, Tuple
import logging
import math
import re

import numpy as np

from .spectral import SpectralOperator, TimeGrid, NoiseModel
from .problem import CoefficientSet, ControlSet, SpectralProblem, LQParams

logger = logging.getLogger("pmp_dpp_lab.scenarios")


# ---------- linear-quadratic family ----------

def make_lq(alpha: float, beta: float, sigma: float, m_cost: float, n_cost: float, gamma: float,
            T: float = 1.0, delta: float = 0.0, steps: int = 100, x0: float = 1.0, seed: int = 0,
            control_range: Tuple[float, float] = (-3.0, 3.0), control_step: float = 0.05,
            box: float = 3.0) -> SpectralProblem:
    """Scalar LQ benchmark with A = 0: a = alpha x + beta u, b = sigma + delta u,
    f = m x^2 + n u^2, h = gamma x^2."""
    if n_cost <= 0:
        raise ValueError(f"n_cost must be > 0, got {n_cost}")
    if T <= 0:
        raise ValueError(f"T must be > 0, got {T}")

    def a(t, x, u):
        return alpha * x + beta * u

    def b(t, x, u):
        return (sigma + delta * u)[:, :, None]

    def f(t, x, u):
        return m_cost * x[:, 0] ** 2 + n_cost * u[:, 0] ** 2

    def h(x):
        return gamma * x[:, 0] ** 2

    coeffs = CoefficientSet(
        a=a, b=b, f=f, h=h,
        a_x=lambda t, x, u: np.full((x.shape[0], 1, 1), float(alpha)),
        b_x=lambda t, x, u: np.zeros((x.shape[0], 1, 1, 1)),
        f_x=lambda t, x, u: 2.0 * m_cost * x,
        h_x=lambda x: 2.0 * gamma * x,
        a_xx=lambda t, x, u: np.zeros((x.shape[0], 1, 1, 1)),
        b_xx=lambda t, x, u: np.zeros((x.shape[0], 1, 1, 1, 1)),
        f_xx=lambda t, x, u: np.full((x.shape[0], 1, 1), 2.0 * m_cost),
        h_xx=lambda x: np.full((x.shape[0], 1, 1), 2.0 * gamma),
    )
    params = LQParams(alpha, beta, sigma, m_cost, n_cost, gamma, T, delta)
    return SpectralProblem(
        name="lq",
        operator=SpectralOperator.zero(1),
        coefficients=coeffs,
        controls=ControlSet.grid(control_range[0], control_range[1], control_step),
        grid=TimeGrid(0.0, T, steps),
        noise=NoiseModel(1, seed),
        initial=np.array([x0]),
        box=box,
        lq=params,
        params={"alpha": alpha, "beta": beta, "sigma": sigma, "m_cost": m_cost, "n_cost": n_cost,
                "gamma": gamma, "T": T, "delta": delta},
    )


def make_lq1(**kwargs) -> SpectralProblem:
    p = make_lq(0.0, 1.0, 0.5, 1.0, 1.0, 1.0, 1.0, **kwargs)
    p.name = "lq1"
    return p


# ---------- field profiles for the parabolic and hyperbolic examples ----------

def qclip(r):
    return np.sqrt(1.0 + r * r) - 1.0


def qclip_r(r):
    return r / np.sqrt(1.0 + r * r)


def qclip_rr(r):
    return (1.0 + r * r) ** -1.5


@dataclass(frozen=True)
class FieldProfile:
    """Scalar Nemytskii profiles and their r-derivatives; u is the (broadcast) scalar control."""

    name: str
    a: Callable
    a_r: Callable
    a_rr: Callable
    b: Callable
    b_r: Callable
    b_rr: Callable
    f: Callable
    f_r: Callable
    f_rr: Callable
    h: Callable
    h_r: Callable
    h_rr: Callable
    control_cost: float = 0.5


def _zeros(r, u=None):
    return np.zeros_like(r)


def _ones(r, u=None):
    return np.ones_like(r)


PROFILES: Dict[str, FieldProfile] = {
    "tanh": FieldProfile(
        "tanh",
        a=lambda r, u: np.tanh(r) + u,
        a_r=lambda r, u: 1.0 - np.tanh(r) ** 2,
        a_rr=lambda r, u: -2.0 * np.tanh(r) * (1.0 - np.tanh(r) ** 2),
        b=lambda r: 0.1 * np.cos(r),
        b_r=lambda r: -0.1 * np.sin(r),
        b_rr=lambda r: -0.1 * np.cos(r),
        f=lambda r, u: qclip(r),
        f_r=lambda r, u: qclip_r(r),
        f_rr=lambda r, u: qclip_rr(r),
        h=qclip, h_r=qclip_r, h_rr=qclip_rr,
    ),
    "linear": FieldProfile(
        "linear",
        a=lambda r, u: np.zeros_like(r) + u,
        a_r=_zeros, a_rr=_zeros,
        b=lambda r: 0.5 * np.ones_like(r),
        b_r=_zeros, b_rr=_zeros,
        f=lambda r, u: r * r,
        f_r=lambda r, u: 2.0 * r,
        f_rr=lambda r, u: 2.0 * np.ones_like(r),
        h=lambda r: r * r,
        h_r=lambda r: 2.0 * r,
        h_rr=lambda r: 2.0 * np.ones_like(r),
        control_cost=1.0,
    ),
    "zero": FieldProfile(
        "zero",
        a=_zeros, a_r=_zeros, a_rr=_zeros,
        b=_zeros, b_r=_zeros, b_rr=_zeros,
        f=_zeros, f_r=_zeros, f_rr=_zeros,
        h=lambda r: r * r,
        h_r=lambda r: 2.0 * r,
        h_rr=lambda r: 2.0 * np.ones_like(r),
        control_cost=0.0,
    ),
}


def check_profile_bounds(profile: FieldProfile, controls: ControlSet, radius: float, bound: float,
                         samples: int = 2001) -> None:
    """Rejects profiles whose drift/diffusion or their first two r-derivatives exceed `bound`."""
    r = np.linspace(-radius, radius, samples)
    for rho in controls.points[:, 0]:
        u = np.full_like(r, rho)
        for name, fn in (("a", profile.a), ("a_r", profile.a_r), ("a_rr", profile.a_rr)):
            worst = float(np.max(np.abs(fn(r, u))))
            if not np.isfinite(worst) or worst > bound:
                i = int(np.argmax(np.abs(fn(r, u))))
                raise ValueError(f"profile '{profile.name}' violates the bound {bound} on {name}: "
                                 f"|{name}|={worst:.4g} at r={r[i]:.4g}, u={rho}")
    for name, fn in (("b", profile.b), ("b_r", profile.b_r), ("b_rr", profile.b_rr)):
        vals = np.abs(fn(r))
        if not np.all(np.isfinite(vals)) or float(np.max(vals)) > bound:
            i = int(np.argmax(vals))
            raise ValueError(f"profile '{profile.name}' violates the bound {bound} on {name} at r={r[i]:.4g}")


class FieldCoefficients:
    """Galerkin projection of Nemytskii coefficients.

    The physical field is r(xi) = sum_j D[q, j] x_j at midpoint nodes xi_q; drift and noise act
    through `out` (dim x Q, quadrature weights folded in) and noise modes `modes` (Q x m).
    """

    def __init__(self, profile: FieldProfile, field_map: np.ndarray, out: np.ndarray, modes: np.ndarray,
                 weight: float):
        self.profile = profile
        self.D = field_map
        self.out = out
        self.modes = modes
        self.w = weight

    def _r(self, x):
        return np.einsum("qj,mj->mq", self.D, x)

    def a(self, t, x, u):
        r = self._r(x)
        return np.einsum("iq,mq->mi", self.out, self.profile.a(r, u[:, :1]))

    def a_x(self, t, x, u):
        r = self._r(x)
        return np.einsum("iq,mq,qj->mij", self.out, self.profile.a_r(r, u[:, :1]), self.D)

    def a_xx(self, t, x, u):
        r = self._r(x)
        return np.einsum("iq,mq,qj,qk->mijk", self.out, self.profile.a_rr(r, u[:, :1]), self.D, self.D,
                         optimize=True)

    def b(self, t, x, u):
        r = self._r(x)
        return np.einsum("iq,mq,ql->mil", self.out, self.profile.b(r), self.modes)

    def b_x(self, t, x, u):
        r = self._r(x)
        return np.einsum("iq,mq,ql,qj->milj", self.out, self.profile.b_r(r), self.modes, self.D, optimize=True)

    def b_xx(self, t, x, u):
        r = self._r(x)
        return np.einsum("iq,mq,ql,qj,qk->miljk", self.out, self.profile.b_rr(r), self.modes, self.D, self.D,
                         optimize=True)

    def f(self, t, x, u):
        r = self._r(x)
        return self.w * np.sum(self.profile.f(r, u[:, :1]), axis=1) + self.profile.control_cost * u[:, 0] ** 2

    def f_x(self, t, x, u):
        r = self._r(x)
        return self.w * np.einsum("mq,qj->mj", self.profile.f_r(r, u[:, :1]), self.D)

    def f_xx(self, t, x, u):
        r = self._r(x)
        return self.w * np.einsum("mq,qj,qk->mjk", self.profile.f_rr(r, u[:, :1]), self.D, self.D)

    def h(self, x):
        return self.w * np.sum(self.profile.h(self._r(x)), axis=1)

    def h_x(self, x):
        return self.w * np.einsum("mq,qj->mj", self.profile.h_r(self._r(x)), self.D)

    def h_xx(self, x):
        return self.w * np.einsum("mq,qj,qk->mjk", self.profile.h_rr(self._r(x)), self.D, self.D)

    def coefficient_set(self) -> CoefficientSet:
        return CoefficientSet(a=self.a, b=self.b, f=self.f, h=self.h,
                              a_x=self.a_x, b_x=self.b_x, f_x=self.f_x, h_x=self.h_x,
                              a_xx=self.a_xx, b_xx=self.b_xx, f_xx=self.f_xx, h_xx=self.h_xx)


def sine_basis(modes: int, nodes: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """Dirichlet eigenfunctions sqrt(2) sin(k pi xi) at midpoint nodes of (0, 1)."""
    xi = (np.arange(nodes) + 0.5) / nodes
    k = np.arange(1, modes + 1)
    return xi, math.sqrt(2.0) * np.sin(np.pi * np.outer(xi, k)), 1.0 / nodes


def _resolve_profile(profile) -> FieldProfile:
    if isinstance(profile, FieldProfile):
        return profile
    if profile not in PROFILES:
        raise ValueError(f"unknown profile '{profile}', expected one of {sorted(PROFILES)}")
    return PROFILES[profile]


def make_heat(N: int, profile="tanh", T: float = 1.0, steps: int = 100, x0=None, seed: int = 0,
              control_range: Tuple[float, float] = (-1.0, 1.0), control_step: float = 0.1,
              box: float = 3.0, bound: float = 10.0, quadrature: Optional[int] = None) -> SpectralProblem:
    """Controlled stochastic heat equation on (0, 1) with Dirichlet data, truncated to N sine modes."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    prof = _resolve_profile(profile)
    controls = ControlSet.grid(control_range[0], control_range[1], control_step)
    nodes = quadrature or max(64, 8 * N)
    _, E, w = sine_basis(N, nodes)
    # |r(xi)| <= sqrt(2) * sum|x_k| <= sqrt(2 N) |x| on the box
    check_profile_bounds(prof, controls, math.sqrt(2.0 * N) * box * math.sqrt(N), bound)
    fc = FieldCoefficients(prof, E, w * E.T, E, w)
    lam = (np.pi * np.arange(1, N + 1)) ** 2
    initial = np.full(N, 1.0 / N) if x0 is None else np.asarray(x0, dtype=float)
    p = SpectralProblem(
        name=f"heat-{N}",
        operator=SpectralOperator.diagonal(lam),
        coefficients=fc.coefficient_set(),
        controls=controls,
        grid=TimeGrid(0.0, T, steps),
        noise=NoiseModel(N, seed),
        initial=initial,
        box=box,
        params={"N": N, "profile": prof.name, "T": T, "bound": bound, "quadrature": nodes},
    )
    if prof.name == "linear" and N == 1:
        # single mode: dX = (-pi^2 X + c u) dt + 0.5 dW with c = int e_1
        c1 = float(w * np.sum(E[:, 0]))
        p.lq = LQParams(-float(lam[0]), c1, 0.5, 1.0, 1.0, 1.0, T)
    return p


def make_wave(N: int, profile="zero", T: float = 1.0, steps: int = 100, x0=None, seed: int = 0,
              control_range: Tuple[float, float] = (-1.0, 1.0), control_step: float = 0.1,
              box: float = 3.0, bound: float = 10.0, quadrature: Optional[int] = None) -> SpectralProblem:
    """Controlled stochastic wave equation in first-order form.

    State coordinates per mode k are (omega_k y_k, v_k) with omega_k = k pi, so the free flow is a
    rotation and the energy |x|^2 is conserved. Forcing and noise act on the velocity components.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    prof = _resolve_profile(profile)
    controls = ControlSet.grid(control_range[0], control_range[1], control_step)
    nodes = quadrature or max(64, 8 * N)
    _, E, w = sine_basis(N, nodes)
    omega = np.pi * np.arange(1, N + 1)
    check_profile_bounds(prof, controls, math.sqrt(2.0 * N) * box * math.sqrt(N), bound)
    # displacement field r = sum_k (x_{2k} / omega_k) e_k; forcing enters v_k = x_{2k+1}
    D = np.zeros((nodes, 2 * N))
    D[:, 0::2] = E / omega
    out = np.zeros((2 * N, nodes))
    out[1::2, :] = w * E.T
    fc = FieldCoefficients(prof, D, out, E, w)
    initial = np.zeros(2 * N)
    initial[0] = 1.0
    if x0 is not None:
        initial = np.asarray(x0, dtype=float)
    return SpectralProblem(
        name=f"wave-{N}",
        operator=SpectralOperator.wave(omega),
        coefficients=fc.coefficient_set(),
        controls=controls,
        grid=TimeGrid(0.0, T, steps),
        noise=NoiseModel(N, seed),
        initial=initial,
        box=box,
        params={"N": N, "profile": prof.name, "T": T, "bound": bound, "quadrature": nodes},
    )


# ---------- deterministic bang-bang toy ----------

def make_bang_bang(T: float = 1.0, x0: float = 1.5, steps: int = 100, seed: int = 0,
                   box: float = 3.0) -> SpectralProblem:
    """dX = u dt with U = {-1, 1}, f = 0, h = x^2."""
    coeffs = CoefficientSet(
        a=lambda t, x, u: u[:, :1] + 0.0 * x,
        b=lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
        f=lambda t, x, u: np.zeros(x.shape[0]),
        h=lambda x: x[:, 0] ** 2,
        a_x=lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
        b_x=lambda t, x, u: np.zeros((x.shape[0], 1, 1, 1)),
        f_x=lambda t, x, u: np.zeros_like(x),
        h_x=lambda x: 2.0 * x,
        a_xx=lambda t, x, u: np.zeros((x.shape[0], 1, 1, 1)),
        b_xx=lambda t, x, u: np.zeros((x.shape[0], 1, 1, 1, 1)),
        f_xx=lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
        h_xx=lambda x: np.full((x.shape[0], 1, 1), 2.0),
    )
    return SpectralProblem(
        name="bang-bang",
        operator=SpectralOperator.zero(1),
        coefficients=coeffs,
        controls=ControlSet(np.array([[-1.0], [1.0]])),
        grid=TimeGrid(0.0, T, steps),
        noise=NoiseModel(1, seed),
        initial=np.array([x0]),
        box=box,
        params={"T": T},
    )


def bang_bang_value(t: float, x, T: float = 1.0) -> np.ndarray:
    """Exact value (max(0, |x| - (T - t)))^2 of the bang-bang toy."""
    return np.maximum(0.0, np.abs(np.asarray(x, dtype=float)) - (T - t)) ** 2


# ---------- registry ----------

@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    builder: Callable[..., SpectralProblem]
    defaults: Dict[str, Any] = field(default_factory=dict)
    description: str = ""


SCENARIOS: Dict[str, ScenarioSpec] = {
    "lq1": ScenarioSpec("lq1", make_lq1, {}, "scalar LQ benchmark alpha=0, beta=1, sigma=0.5, m=n=gamma=1, T=1"),
    "lq-family": ScenarioSpec(
        "lq-family", make_lq,
        {"alpha": 0.0, "beta": 1.0, "sigma": 0.5, "m_cost": 1.0, "n_cost": 1.0, "gamma": 1.0, "T": 1.0,
         "delta": 0.0},
        "scalar LQ with control-dependent diffusion b = sigma + delta u"),
    "heat-N": ScenarioSpec("heat-N", make_heat, {"N": 2, "profile": "tanh", "T": 1.0, "bound": 10.0},
                           "stochastic heat equation on (0,1), N Dirichlet modes"),
    "wave-N": ScenarioSpec("wave-N", make_wave, {"N": 2, "profile": "zero", "T": 1.0, "bound": 10.0},
                           "stochastic wave equation, first-order form with 2N coordinates"),
    "bang-bang": ScenarioSpec("bang-bang", make_bang_bang, {"T": 1.0, "x0": 1.5},
                              "deterministic dX = u dt, U = {-1, 1}, h = x^2"),
}

_SIZED = re.compile(r"^(heat|wave)-(\d+)$")


def resolve_scenario(name: str) -> Tuple[ScenarioSpec, Dict[str, Any]]:
    """Registry entry plus parameters implied by the name ('heat-4' -> heat-N with N=4)."""
    if name in SCENARIOS:
        return SCENARIOS[name], {}
    m = _SIZED.match(name)
    if m:
        return SCENARIOS[f"{m.group(1)}-N"], {"N": int(m.group(2))}
    raise ValueError(f"unknown scenario '{name}', expected one of {sorted(SCENARIOS)}")


def build_scenario(name: str, params: Optional[Dict[str, Any]] = None, **grid) -> SpectralProblem:
    spec, implied = resolve_scenario(name)
    kwargs = dict(spec.defaults)
    kwargs.update(implied)
    for key in (params or {}):
        if key not in spec.defaults and key not in ("x0",):
            raise ValueError(f"unknown parameter '{key}' for scenario '{spec.name}'")
    kwargs.update(params or {})
    kwargs.update({k: v for k, v in grid.items() if v is not None})
    if "control_range" in kwargs:
        kwargs["control_range"] = tuple(kwargs["control_range"])
    if spec.name == "bang-bang":
        kwargs.pop("control_range", None)
        kwargs.pop("control_step", None)
    problem = spec.builder(**kwargs)
    logger.info(f"built scenario '{name}' (dim={problem.dim}, noise_dim={problem.noise_dim}, steps={problem.grid.steps})")
    return problem


def list_scenarios() -> str:
    lines = []
    for spec in SCENARIOS.values():
        params = ", ".join(f"{k}={v}" for k, v in spec.defaults.items()) or "none"
        lines.append(f"{spec.name}: {spec.description} | params: {params}")
    return "\n".join(lines)
