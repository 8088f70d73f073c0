
from __future__ import annotations
from dataclasses import dataclass
import logging

import numpy as np

from .problem import LQParams
from .spectral import TimeGrid

logger = logging.getLogger("pmp_dpp_lab.riccati")

ESCAPE_LEVEL = 1e12


class RiccatiBlowUp(RuntimeError):
    def __init__(self, escape_time: float):
        self.escape_time = escape_time
        super().__init__(f"Riccati solution escapes to infinity near t={escape_time:.6g}")


def _rk4_backward(rhs, terminal: np.ndarray, grid: TimeGrid, substeps: int) -> np.ndarray:
    """Integrate y' = rhs(y) backward from T over the grid nodes; y[i] is the value at node i."""
    L = grid.steps
    out = np.empty((L + 1,) + terminal.shape)
    out[L] = terminal
    y = terminal.astype(float)
    h = -grid.dt / substeps
    nodes = grid.nodes
    for i in range(L - 1, -1, -1):
        for _ in range(substeps):
            k1 = rhs(y)
            k2 = rhs(y + 0.5 * h * k1)
            k3 = rhs(y + 0.5 * h * k2)
            k4 = rhs(y + h * k3)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > ESCAPE_LEVEL:
                raise RiccatiBlowUp(float(nodes[i]))
        out[i] = y
    return out


@dataclass
class RiccatiSolution:
    """Closed-form LQ oracle: V = pi x^2 + c, u* = -(beta pi / n) x, p = -2 pi x, q = -2 pi sigma,
    second-order adjoint P solving P' = -2 alpha P + 2m, P(T) = -2 gamma."""

    params: LQParams
    grid: TimeGrid
    pi: np.ndarray
    c: np.ndarray
    P2: np.ndarray

    def _at(self, arr: np.ndarray, t) -> np.ndarray:
        return np.interp(t, self.grid.nodes, arr)

    def pi_at(self, t):
        return self._at(self.pi, t)

    def value(self, t, x):
        return self.pi_at(t) * np.asarray(x) ** 2 + self._at(self.c, t)

    def value_x(self, t, x):
        return 2.0 * self.pi_at(t) * np.asarray(x)

    def value_xx(self, t, x=None):
        return 2.0 * self.pi_at(t) * np.ones_like(np.asarray(x if x is not None else 0.0, dtype=float))

    def value_t(self, t, x):
        lq = self.params
        pi = self.pi_at(t)
        dpi = -2.0 * lq.alpha * pi + lq.beta ** 2 * pi ** 2 / lq.n_cost - lq.m_cost
        return dpi * np.asarray(x) ** 2 - lq.sigma ** 2 * pi

    def gain(self, t):
        return -self.params.beta * self.pi_at(t) / self.params.n_cost

    def control(self, t, x):
        return self.gain(t) * np.asarray(x)

    def p(self, t, x):
        return -self.value_x(t, x)

    def q(self, t, x=None):
        return -2.0 * self.pi_at(t) * self.params.sigma

    def P(self, t):
        return self._at(self.P2, t)


def solve_riccati(params: LQParams, grid: TimeGrid, substeps: int = 10) -> RiccatiSolution:
    """pi' = -2 alpha pi + beta^2 pi^2 / n - m, pi(T) = gamma; c' = -sigma^2 pi, c(T) = 0."""
    if params.n_cost <= 0:
        raise ValueError(f"n_cost must be > 0, got {params.n_cost}")
    if params.delta != 0.0:
        raise ValueError("the Riccati oracle covers control-independent diffusion only (delta == 0)")
    a, b, s, m, n = params.alpha, params.beta, params.sigma, params.m_cost, params.n_cost

    def rhs(y):
        pi = y[0]
        return np.array([-2.0 * a * pi + b * b * pi * pi / n - m, -s * s * pi, -2.0 * a * y[2] + 2.0 * m])

    path = _rk4_backward(rhs, np.array([params.gamma, 0.0, -2.0 * params.gamma]), grid, substeps)
    logger.info(f"solve_riccati: pi(t0)={path[0, 0]:.10g}, c(t0)={path[0, 1]:.10g}")
    return RiccatiSolution(params, grid, path[:, 0], path[:, 1], path[:, 2])
