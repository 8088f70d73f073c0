
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Optional
import logging
import math

import numpy as np
import pandas as pd
from tqdm import tqdm

from .problem import SpectralProblem
from .regression import RegressionBasis
from .simulate import PathBundle, simulate_test_process, frozen_linearization
from .backward import AdjointFirst

logger = logging.getLogger("pmp_dpp_lab.second_adjoint")


def hamiltonian_H(p: SpectralProblem, t: float, x: np.ndarray, u: np.ndarray, pv: np.ndarray,
                  qv: np.ndarray) -> np.ndarray:
    """<p, a> + <q, b>_{HS} - f, batched over rows."""
    c = p.coefficients
    return (np.einsum("mi,mi->m", pv, c.a(t, x, u))
            + np.einsum("mil,mil->m", qv, c.b(t, x, u))
            - c.f(t, x, u))


def hessian_H(p: SpectralProblem, t: float, x: np.ndarray, u: np.ndarray, pv: np.ndarray,
              qv: np.ndarray) -> np.ndarray:
    """H_xx = p . a_xx + q . b_xx - f_xx, shape (M, N, N)."""
    c = p.coefficients
    out = (np.einsum("mi,mijk->mjk", pv, c.hess_a(t, x, u))
           + np.einsum("mil,miljk->mjk", qv, c.hess_b(t, x, u))
           - c.hess_f(t, x, u))
    return 0.5 * (out + np.swapaxes(out, 1, 2))


@dataclass
class HamiltonianHessian:
    """F(t) = -H_xx(t, X, u, p, q) per (path, step), shape (M, L, N, N)."""

    F: np.ndarray


def hamiltonian_hessian(p: SpectralProblem, bundle: PathBundle, adjoint: AdjointFirst) -> HamiltonianHessian:
    nodes = bundle.times
    F = np.stack([-hessian_H(p, float(nodes[i]), bundle.states[:, i], bundle.controls[:, i],
                             adjoint.p[:, i], adjoint.q[:, i]) for i in range(bundle.steps)], axis=1)
    return HamiltonianHessian(F)


@dataclass
class AdjointSecond:
    """P (M, L+1, N, N) symmetric, Q (M, L, N, N, m) with Q[..., l] symmetric; stderr_P accumulated from T."""

    grid: object
    P: np.ndarray
    Q: np.ndarray
    stderr_P: np.ndarray
    symmetry_defect: np.ndarray
    condition: np.ndarray
    residual: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def Q_hat(self) -> np.ndarray:
        """Adjoint field of Q: per noise direction the transposed matrix."""
        return np.swapaxes(self.Q, 2, 3)

    def diagnostics(self) -> pd.DataFrame:
        """time, norm_mean_P, symmetry_defect, residual."""
        norm_mean = np.sqrt(np.sum(np.mean(self.P, axis=0) ** 2, axis=(1, 2)))
        resid = self.residual if self.residual.size else np.full(norm_mean.size, np.nan)
        return pd.DataFrame({"time": self.grid.nodes, "norm_mean_P": norm_mean,
                             "symmetry_defect": self.symmetry_defect, "residual": resid})


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def solve_second_adjoint(p: SpectralProblem, bundle: PathBundle, adjoint: AdjointFirst,
                         basis: RegressionBasis = RegressionBasis(), F: Optional[np.ndarray] = None,
                         P_T: Optional[np.ndarray] = None, progress: bool = False) -> AdjointSecond:
    """Matrix BSDE P_i = S^T (Phat + D dt) S with
    D = a_x^T Phat + Phat a_x + sum_l (b_l^T Phat b_l + b_l^T Q_l + Q_l b_l) - F,
    b_l = b_x[:, :, l, :] and F = -H_xx unless overridden; P_L = -h_xx(X_L) unless P_T is given.
    """
    c = p.coefficients
    M, L, N, m = bundle.paths, bundle.steps, p.dim, p.noise_dim
    dt = bundle.grid.dt
    nodes = bundle.times
    P = np.empty((M, L + 1, N, N))
    Q = np.empty((M, L, N, N, m))
    se = np.zeros(L + 1)
    defect = np.zeros(L + 1)
    resid = np.zeros(L + 1)
    cond = np.ones(L)
    terminal = -c.hess_h(bundle.states[:, L]) if P_T is None else np.broadcast_to(P_T, (M, N, N))
    P[:, L] = _sym(terminal)
    defect[L] = float(np.max(np.abs(terminal - np.swapaxes(terminal, 1, 2))))
    steps = range(L - 1, -1, -1)
    for i in (tqdm(steps, desc="adjoint-2", leave=False) if progress else steps):
        t = float(nodes[i])
        x, u, dw = bundle.states[:, i], bundle.controls[:, i], bundle.increments[:, i]
        proj = basis.fit(x, bundle.first_step + i)
        p_hat, se_i = proj.project(P[:, i + 1])
        dev = P[:, i + 1] - p_hat
        q, _ = proj.project(dev[..., None] * dw[:, None, None, :])
        Q[:, i] = _sym(np.moveaxis(q / dt, -1, 1)).transpose(0, 2, 3, 1)
        ax = c.jac_a(t, x, u)
        bx = c.jac_b(t, x, u)
        if F is None:
            f_i = -hessian_H(p, t, x, u, adjoint.p[:, i], adjoint.q[:, i])
        else:
            f_i = np.broadcast_to(F[:, i] if np.ndim(F) == 4 else F, (M, N, N))
        D = np.einsum("mki,mkj->mij", ax, p_hat) + np.einsum("mik,mkj->mij", p_hat, ax)
        D = D + np.einsum("mkli,mkr,mrlj->mij", bx, p_hat, bx)
        D = D + np.einsum("mkli,mkjl->mij", bx, Q[:, i]) + np.einsum("mikl,mklj->mij", Q[:, i], bx)
        D = D - f_i
        raw = p.operator.conjugate(dt, p_hat + D * dt)
        defect[i] = float(np.max(np.abs(raw - np.swapaxes(raw, 1, 2))))
        P[:, i] = _sym(raw)
        se[i] = float(np.hypot(np.max(se_i), se[i + 1]))
        resid[i] = float(np.sqrt(np.mean(np.sum(dev ** 2, axis=(1, 2)))))
        cond[i] = proj.condition_number
    logger.info(f"solve_second_adjoint: M={M}, L={L}, mean P0 diag={np.diagonal(np.mean(P[:, 0], axis=0))}")
    return AdjointSecond(bundle.grid, P, Q, se, defect, cond, resid)


@dataclass
class TranspositionTestData:
    """Two triples (xi_j, u_j, v_j): xi (M, N), u (M, L, N), v (M, L, N, m)."""

    xi1: np.ndarray
    u1: np.ndarray
    v1: np.ndarray
    xi2: np.ndarray
    u2: np.ndarray
    v2: np.ndarray

    @classmethod
    def zero_drift(cls, bundle: PathBundle, xi1, xi2, v1=None, v2=None) -> "TranspositionTestData":
        M, L, N = bundle.paths, bundle.steps, bundle.dim
        m = bundle.increments.shape[2]
        z = np.zeros((M, L, N))
        zv = np.zeros((M, L, N, m))
        return cls(np.broadcast_to(xi1, (M, N)), z, zv if v1 is None else np.broadcast_to(v1, (M, L, N, m)),
                   np.broadcast_to(xi2, (M, N)), z, zv if v2 is None else np.broadcast_to(v2, (M, L, N, m)))

    @classmethod
    def random(cls, bundle: PathBundle, seed: int = 0, scale: float = 1.0) -> "TranspositionTestData":
        """Deterministic xi and data driven by time and the stored state (adapted by construction)."""
        rng = np.random.default_rng(seed)
        M, L, N = bundle.paths, bundle.steps, bundle.dim
        m = bundle.increments.shape[2]
        times = bundle.times[:-1]
        x = bundle.states[:, :-1]

        def drift():
            a, b = rng.normal(size=N), rng.normal(size=(N, N))
            return scale * (a[None, None, :] * np.cos(times)[None, :, None] + 0.5 * np.einsum("ij,msj->msi", b, x))

        def diffusion():
            a, b = rng.normal(size=(N, m)), rng.normal(size=(N, m, N))
            return scale * (a[None, None] * np.sin(1.0 + times)[None, :, None, None]
                            + 0.5 * np.einsum("ilj,msj->msil", b, x))

        xi1 = np.broadcast_to(scale * rng.normal(size=N), (M, N))
        xi2 = np.broadcast_to(scale * rng.normal(size=N), (M, N))
        return cls(xi1, drift(), diffusion(), xi2, drift(), diffusion())


@dataclass
class TranspositionResult:
    residual: float
    lhs: float
    rhs: float
    stderr: float
    terms: Dict[str, float] = field(default_factory=dict)


def transposition_residual(p: SpectralProblem, bundle: PathBundle, data: TranspositionTestData,
                           solution: AdjointSecond, adjoint: Optional[AdjointFirst] = None,
                           F: Optional[np.ndarray] = None, P_T: Optional[np.ndarray] = None,
                           phi1: Optional[PathBundle] = None, phi2: Optional[PathBundle] = None) -> TranspositionResult:
    """Both sides of the duality identity

        E<P_T phi1(T), phi2(T)> - E int <F phi1, phi2>
          = E<P(t) xi1, xi2> + E int <P u1, phi2> + <P phi1, u2> + <P K phi1, v2>
            + <P v1, K phi2 + v2> + <Q(t)(xi1,u1,v1), v2> + <v1, Qhat(t)(xi2,u2,v2)> ds

    where Q(t)(xi,u,v)(s) = [Q_l phi]_l and Qhat(t)(xi,u,v)(s) = [Q_l^T phi]_l, phi the test process
    driven by (xi, u, v).

    The step [s_i, s_{i+1}) pairs S(dt)* P_{i+1} S(dt) (likewise Q and F) with the data at s_i, matching
    phi_{i+1} = S(dt)(phi_i + alpha dt + beta dW), and carries the dt^2 <P alpha1, alpha2> term of the
    product rule, alpha = J phi + u. With frozen (J, K) = 0 the two sides then agree in expectation
    at every step size.
    """
    J, K = frozen_linearization(p, bundle)
    if phi1 is None:
        phi1 = simulate_test_process(p, bundle, J, K, data.xi1, data.u1, data.v1)
    if phi2 is None:
        phi2 = simulate_test_process(p, bundle, J, K, data.xi2, data.u2, data.v2)
    for phi in (phi1, phi2):
        if phi.increments.shape != bundle.increments.shape or not np.array_equal(phi.increments, bundle.increments):
            raise ValueError("test processes were not simulated on the bundle's noise")
    M, L = bundle.paths, bundle.steps
    dt = bundle.grid.dt
    if F is None:
        if adjoint is None:
            raise ValueError("transposition_residual needs the first-order adjoint or an explicit F")
        F = hamiltonian_hessian(p, bundle, adjoint).F
    op = p.operator
    F = op.conjugate(dt, np.broadcast_to(F, (M, L) + F.shape[-2:]))
    P_T = solution.P[:, L] if P_T is None else np.broadcast_to(P_T, solution.P[:, L].shape)
    f1, f2 = phi1.states, phi2.states
    P = op.conjugate(dt, solution.P[:, 1:])
    Q = np.moveaxis(op.conjugate(dt, np.moveaxis(solution.Q, -1, 2)), 2, -1)
    QT = np.swapaxes(Q, 2, 3)

    lhs_end = np.einsum("mij,mj,mi->m", P_T, f1[:, L], f2[:, L])
    lhs_int = np.sum(np.einsum("msij,msj,msi->ms", F, f1[:, :L], f2[:, :L]), axis=1) * dt
    lhs = lhs_end - lhs_int

    Kf1 = np.einsum("msilj,msj->msil", K, f1[:, :L])
    Kf2 = np.einsum("msilj,msj->msil", K, f2[:, :L])
    alpha1 = np.einsum("msij,msj->msi", J, f1[:, :L]) + data.u1
    alpha2 = np.einsum("msij,msj->msi", J, f2[:, :L]) + data.u2
    terms = {
        "P_xi": np.einsum("mij,mj,mi->m", solution.P[:, 0], data.xi1, data.xi2),
        "P_u1_phi2": np.sum(np.einsum("msij,msj,msi->ms", P, data.u1, f2[:, :L]), axis=1) * dt,
        "P_phi1_u2": np.sum(np.einsum("msij,msj,msi->ms", P, f1[:, :L], data.u2), axis=1) * dt,
        "P_Kphi1_v2": np.sum(np.einsum("msij,msjl,msil->ms", P, Kf1, data.v2), axis=1) * dt,
        "P_v1_Kphi2_v2": np.sum(np.einsum("msij,msjl,msil->ms", P, data.v1, Kf2 + data.v2), axis=1) * dt,
        "Q_phi1_v2": np.sum(np.einsum("msijl,msj,msil->ms", Q, f1[:, :L], data.v2), axis=1) * dt,
        "v1_Qhat_phi2": np.sum(np.einsum("msil,msijl,msj->ms", data.v1, QT, f2[:, :L]), axis=1) * dt,
        "P_alpha1_alpha2": np.sum(np.einsum("msij,msj,msi->ms", P, alpha1, alpha2), axis=1) * dt * dt,
    }
    rhs = sum(terms.values())
    diff = lhs - rhs
    stderr = float(np.std(diff, ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    result = TranspositionResult(
        residual=float(abs(np.mean(diff))),
        lhs=float(np.mean(lhs)),
        rhs=float(np.mean(rhs)),
        stderr=stderr,
        terms={k: float(np.mean(v)) for k, v in terms.items()},
    )
    logger.info(f"transposition_residual: lhs={result.lhs:.6g}, rhs={result.rhs:.6g}, "
                f"residual={result.residual:.3g} (se {stderr:.3g})")
    return result


def _data_norm(F: np.ndarray, grid) -> float:
    F = np.asarray(F, dtype=float)
    if F.ndim == 4:
        return math.sqrt(float(np.mean(np.sum(np.sum(F ** 2, axis=(2, 3)), axis=1) * grid.dt)))
    return math.sqrt(float(np.sum(F ** 2)) * (grid.T - grid.t0))


def wellposedness_bound(solution: AdjointSecond, F: np.ndarray, P_T: np.ndarray) -> float:
    """(sup_s E|P|^2)^1/2 + (E int |Q|^2)^1/2 over (E int |F|^2)^1/2 + (E|P_T|^2)^1/2; 0 for zero data."""
    dt = solution.grid.dt
    P_T = np.asarray(P_T, dtype=float)
    data = _data_norm(F, solution.grid) + math.sqrt(float(np.mean(np.sum(P_T ** 2, axis=(-2, -1)))))
    if data == 0.0:
        return 0.0
    sol = math.sqrt(float(np.max(np.mean(np.sum(solution.P ** 2, axis=(2, 3)), axis=0)))) \
        + math.sqrt(float(np.mean(np.sum(np.sum(solution.Q ** 2, axis=(2, 3, 4)), axis=1) * dt)))
    return sol / data
