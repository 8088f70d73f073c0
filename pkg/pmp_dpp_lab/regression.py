
from __future__ import annotations
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import List, Optional, Tuple
import logging

import numpy as np
from scipy import linalg

logger = logging.getLogger("pmp_dpp_lab.regression")

# relative singular-value cutoff for the rank test
RANK_RTOL = 1e-10


class RegressionError(RuntimeError):
    """Rank-deficient least-squares design at a backward step."""

    def __init__(self, step: Optional[int], rank: int, columns: int):
        self.step = step
        self.rank = rank
        self.columns = columns
        super().__init__(f"rank-deficient regression at step {step}: rank {rank} < {columns} basis functions")


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomials up to total `degree` in standardized state coordinates.

    Coordinates whose sample spread vanishes are dropped before the design is built, so a
    deterministic state (all paths equal) falls back to the constant function alone.
    """

    degree: int = 2
    spread_tol: float = 1e-12

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"basis degree must be >= 0, got {self.degree}")

    def fit(self, x: np.ndarray, step: Optional[int] = None) -> "Projector":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        center = x.mean(axis=0)
        scale = x.std(axis=0)
        active = scale > self.spread_tol * (1.0 + np.abs(center))
        terms = self._terms(int(np.sum(active)))
        proj = Projector(self, center, np.where(active, scale, 1.0), active, terms, step)
        proj.factor(x)
        return proj

    def _terms(self, n_active: int) -> List[Tuple[int, ...]]:
        terms: List[Tuple[int, ...]] = [()]
        for d in range(1, self.degree + 1):
            terms.extend(combinations_with_replacement(range(n_active), d))
        return terms

    def size(self, dim: int) -> int:
        return len(self._terms(dim))


class Projector:
    """Least-squares projection onto a fitted basis; one design, many targets."""

    def __init__(self, basis: RegressionBasis, center, scale, active, terms, step):
        self.basis = basis
        self.center = center
        self.scale = scale
        self.active = active
        self.terms = terms
        self.step = step
        self.design: Optional[np.ndarray] = None
        self.condition_number = 1.0

    def features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        z = ((x - self.center) / self.scale)[:, self.active]
        cols = [np.ones(x.shape[0])]
        for term in self.terms[1:]:
            col = np.ones(x.shape[0])
            for j in term:
                col = col * z[:, j]
            cols.append(col)
        return np.stack(cols, axis=1)

    def factor(self, x: np.ndarray) -> None:
        design = self.features(x)
        k = design.shape[1]
        if design.shape[0] < k:
            raise RegressionError(self.step, design.shape[0], k)
        sv = linalg.svdvals(design)
        rank = int(np.sum(sv > RANK_RTOL * sv[0]))
        if rank < k:
            raise RegressionError(self.step, rank, k)
        self.condition_number = float(sv[0] / sv[-1])
        self.design = design

    @property
    def columns(self) -> int:
        return len(self.terms)

    def coefficients(self, targets: np.ndarray) -> np.ndarray:
        y = np.asarray(targets, dtype=float)
        flat = y.reshape(y.shape[0], -1)
        coef, _, _, _ = linalg.lstsq(self.design, flat)
        return coef

    def project(self, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Fitted conditional expectations (same shape as targets) and their standard errors."""
        y = np.asarray(targets, dtype=float)
        flat = y.reshape(y.shape[0], -1)
        coef = self.coefficients(flat)
        fitted = self.design @ coef
        m, k = self.design.shape
        dof = max(m - k, 1)
        resid_sd = np.sqrt(np.sum((flat - fitted) ** 2, axis=0) / dof)
        stderr = resid_sd * np.sqrt(k / m)
        return fitted.reshape(y.shape), stderr.reshape(y.shape[1:])

    def leverage(self, x: np.ndarray) -> np.ndarray:
        """phi(x)^T (D^T D)^{-1} phi(x) per row; averages k/m over the fitted sample."""
        phi = self.features(x)
        gram = self.design.T @ self.design
        return np.einsum("mk,km->m", phi, linalg.solve(gram, phi.T, assume_a="pos"))

    def predict(self, coef: np.ndarray, x: np.ndarray, shape=()) -> np.ndarray:
        out = self.features(x) @ coef
        return out.reshape((out.shape[0],) + tuple(shape))


def project(basis: RegressionBasis, x: np.ndarray, targets: np.ndarray, step: Optional[int] = None):
    """One-shot projection of targets on the basis evaluated at x."""
    proj = basis.fit(x, step)
    fitted, stderr = proj.project(targets)
    return fitted, stderr, proj.condition_number
