
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Optional
import math

import numpy as np

# StateVector: float array (..., N) of eigen-coefficients.
# HSMatrix: float array (..., N, m), truncated Hilbert-Schmidt operator.

_BLOCK_PATHS = 1024


def hs_norm(b: np.ndarray) -> np.ndarray:
    """Hilbert-Schmidt norm of (..., N, m) arrays (Frobenius over the last two axes)."""
    return np.sqrt(np.sum(np.asarray(b) ** 2, axis=(-2, -1)))


def state_norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(x) ** 2, axis=-1))


@dataclass(frozen=True)
class SpectralOperator:
    """Retained part of A on its eigenbasis.

    Diagonal kind: A e_k = -eigenvalues[k] e_k.
    Wave kind: per mode k the coordinates (omega_k y_k, v_k) evolve under the skew block
    [[0, omega_k], [-omega_k, 0]]; eigenvalues are then the real parts (zeros).
    """

    eigenvalues: np.ndarray
    frequencies: Optional[np.ndarray] = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        object.__setattr__(self, "eigenvalues", lam)
        if lam.size == 0:
            raise ValueError("SpectralOperator needs at least one eigenvalue")
        if not np.all(np.isfinite(lam)):
            raise ValueError("eigenvalues must be finite")
        if self.frequencies is not None:
            om = np.asarray(self.frequencies, dtype=float).reshape(-1)
            if 2 * om.size != lam.size:
                raise ValueError("wave operator needs dim == 2 * number of modes")
            object.__setattr__(self, "frequencies", om)

    @classmethod
    def diagonal(cls, eigenvalues) -> "SpectralOperator":
        return cls(np.asarray(eigenvalues, dtype=float))

    @classmethod
    def zero(cls, dim: int) -> "SpectralOperator":
        return cls(np.zeros(dim))

    @classmethod
    def wave(cls, frequencies) -> "SpectralOperator":
        om = np.asarray(frequencies, dtype=float).reshape(-1)
        return cls(np.zeros(2 * om.size), om)

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def is_diagonal(self) -> bool:
        return self.frequencies is None

    @property
    def dissipative(self) -> bool:
        return bool(np.all(self.eigenvalues >= 0.0))

    def matrix(self) -> np.ndarray:
        if self.is_diagonal:
            return np.diag(-self.eigenvalues)
        a = np.zeros((self.dim, self.dim))
        for k, om in enumerate(self.frequencies):
            a[2 * k, 2 * k + 1] = om
            a[2 * k + 1, 2 * k] = -om
        return a

    def semigroup(self, t: float) -> np.ndarray:
        """S(t) as an N x N matrix; rotation blocks in the wave case."""
        if t < 0:
            raise ValueError(f"semigroup time must be >= 0, got {t}")
        if self.is_diagonal:
            return np.diag(np.exp(-self.eigenvalues * t))
        s = np.zeros((self.dim, self.dim))
        for k, om in enumerate(self.frequencies):
            c, sn = math.cos(om * t), math.sin(om * t)
            s[2 * k: 2 * k + 2, 2 * k: 2 * k + 2] = [[c, sn], [-sn, c]]
        return s

    def apply(self, t: float, v: np.ndarray) -> np.ndarray:
        """S(t) v for v of shape (..., N)."""
        if t < 0:
            raise ValueError(f"semigroup time must be >= 0, got {t}")
        v = np.asarray(v, dtype=float)
        if self.is_diagonal:
            return v * np.exp(-self.eigenvalues * t)
        return np.einsum("ij,...j->...i", self.semigroup(t), v)

    def apply_adjoint(self, t: float, v: np.ndarray) -> np.ndarray:
        """S(t)* v for v of shape (..., N)."""
        v = np.asarray(v, dtype=float)
        if self.is_diagonal:
            return self.apply(t, v)
        return np.einsum("ji,...j->...i", self.semigroup(t), v)

    def conjugate(self, t: float, m: np.ndarray) -> np.ndarray:
        """S(t)* M S(t) for M of shape (..., N, N)."""
        m = np.asarray(m, dtype=float)
        if self.is_diagonal:
            e = np.exp(-self.eigenvalues * t)
            return m * e[:, None] * e[None, :]
        s = self.semigroup(t)
        return np.einsum("ki,...kl,lj->...ij", s, m, s)

    def generator_apply(self, v: np.ndarray) -> np.ndarray:
        """A v."""
        v = np.asarray(v, dtype=float)
        if self.is_diagonal:
            return -self.eigenvalues * v
        return np.einsum("ij,...j->...i", self.matrix(), v)

    def generator_adjoint_apply(self, v: np.ndarray) -> np.ndarray:
        """A* v."""
        v = np.asarray(v, dtype=float)
        if self.is_diagonal:
            return -self.eigenvalues * v
        return np.einsum("ji,...j->...i", self.matrix(), v)


def semigroup_apply(op: SpectralOperator, t: float, v: np.ndarray) -> np.ndarray:
    return op.apply(t, v)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if not (0.0 <= self.t0 < self.T):
            raise ValueError(f"need 0 <= t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        nodes = self.t0 + np.arange(self.steps + 1) * self.dt
        nodes[-1] = self.T
        return nodes

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of grid node t; off-grid times are rejected."""
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if i < 0 or i > self.steps or abs(x - i) > tol * max(1.0, abs(x)):
            raise ValueError(f"time {t} is not a node of {self}")
        return i

    def window(self, i0: int, i1: Optional[int] = None) -> "TimeGrid":
        i1 = self.steps if i1 is None else i1
        if not (0 <= i0 < i1 <= self.steps):
            raise ValueError(f"invalid window [{i0}, {i1}] on {self.steps} steps")
        nodes = self.nodes
        return TimeGrid(float(nodes[i0]), float(nodes[i1]), i1 - i0)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.steps * factor)


@dataclass(frozen=True)
class NoiseModel:
    """Truncated cylindrical Brownian motion with counter-based per-path streams.

    Paths are drawn in fixed blocks of 1024; block b of stream s is keyed by
    SeedSequence(seed, spawn_key=(s, b)), so the increments of a path depend only on
    (seed, stream, path id, grid), never on how many paths are requested or in which order.
    """

    noise_dim: int
    seed: int = 0

    def __post_init__(self):
        if self.noise_dim < 1:
            raise ValueError(f"noise_dim must be positive, got {self.noise_dim}")

    def _block(self, stream: int, block: int, shape) -> np.ndarray:
        ss = np.random.SeedSequence(int(self.seed) % (2 ** 64), spawn_key=(int(stream), int(block)))
        rng = np.random.Generator(np.random.Philox(ss))
        return rng.standard_normal((_BLOCK_PATHS,) + tuple(shape))

    def standard_normals(self, steps: int, paths: int, stream: int = 0, first_path: int = 0) -> np.ndarray:
        if paths < 1 or steps < 1:
            raise ValueError(f"paths and steps must be >= 1, got paths={paths}, steps={steps}")
        out = np.empty((paths, steps, self.noise_dim))
        last = first_path + paths
        for b in range(first_path // _BLOCK_PATHS, (last - 1) // _BLOCK_PATHS + 1):
            lo, hi = b * _BLOCK_PATHS, (b + 1) * _BLOCK_PATHS
            s, e = max(lo, first_path), min(hi, last)
            draws = self._block(stream, b, (steps, self.noise_dim))
            out[s - first_path: e - first_path] = draws[s - lo: e - lo]
        return out


def sample_increments(noise: NoiseModel, grid: TimeGrid, paths: int, stream: int = 0,
                      first_path: int = 0) -> np.ndarray:
    """Brownian increments of shape (paths, L, m) with variance dt per coordinate."""
    return noise.standard_normals(grid.steps, paths, stream, first_path) * math.sqrt(grid.dt)


def coarsen_increments(dw: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive fine increments so coarse and fine paths share one Brownian path."""
    m, steps, d = dw.shape
    if steps % factor:
        raise ValueError(f"{steps} steps not divisible by {factor}")
    return dw.reshape(m, steps // factor, factor, d).sum(axis=2)
