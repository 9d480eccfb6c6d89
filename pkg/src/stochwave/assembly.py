"""Discrete generator, noise input and energy weight of the boundary-damped wave system.

State vectors are flat arrays ordered ``[phi, phi_t, delta, delta_t]``.  The
``phi`` blocks live on the stored nodes (interior plus gamma1; gamma0 values
are eliminated), the ``delta`` blocks on the gamma1 nodes.

The Laplacian is the lumped-mass P1 (equivalently second-order central
difference) operator ``W^{-1}(-K phi + P D delta_t)``, where ``K`` is the
Dirichlet-form stiffness, ``W`` the lumped mass, ``P`` the gamma1 trace
injection and ``D`` the boundary quadrature weights.  The Neumann coupling
``d phi/dn = delta_t`` thus enters through the weak form, and the energy
weight ``M = diag(rho K, rho c^-2 W, k D, m D)`` satisfies
``sym(M A) = -d Q`` with ``Q = diag(0, 0, 0, D)`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from .domain import Grid

AUDIT_RTOL = 1e-12


class AssemblyError(RuntimeError):
    """Fatal invariant violation during operator assembly."""


@dataclass(frozen=True)
class PhysParams:
    rho: float = 1.0
    c: float = 1.0
    m: float = 1.0
    d: float = 1.0
    k: float = 1.0

    def __post_init__(self):
        for name in ("rho", "c", "m", "k"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be strictly positive, got {v}")
        if not (np.isfinite(self.d) and self.d >= 0):
            raise ValueError(f"d must be nonnegative, got {self.d}")


@dataclass(frozen=True)
class StateLayout:
    n_phi: int
    n_b: int

    @property
    def size(self) -> int:
        return 2 * self.n_phi + 2 * self.n_b

    @property
    def phi(self) -> slice:
        return slice(0, self.n_phi)

    @property
    def phi_t(self) -> slice:
        return slice(self.n_phi, 2 * self.n_phi)

    @property
    def delta(self) -> slice:
        return slice(2 * self.n_phi, 2 * self.n_phi + self.n_b)

    @property
    def delta_t(self) -> slice:
        return slice(2 * self.n_phi + self.n_b, self.size)

    def pack(self, phi=0.0, phi_t=0.0, delta=0.0, delta_t=0.0) -> np.ndarray:
        x = np.zeros(self.size)
        x[self.phi] = phi
        x[self.phi_t] = phi_t
        x[self.delta] = delta
        x[self.delta_t] = delta_t
        return x

    def split(self, x):
        x = np.asarray(x)
        return x[..., self.phi], x[..., self.phi_t], x[..., self.delta], x[..., self.delta_t]


@dataclass(frozen=True)
class EnergySample:
    t: float
    acoustic: float
    boundary: float
    total: float


@dataclass(frozen=True, eq=False)
class OperatorSet:
    """Assembled operators.  Dense arrays; immutable after assembly.

    The ``*_white`` properties express everything in energy coordinates
    ``y = L^T x`` with ``M = L L^T``, where the H-inner product becomes the
    Euclidean one, ``A_white`` is skew up to ``-d Q_white``, and the
    M-adjoint of any operator becomes its transpose.
    """

    grid: Grid
    params: PhysParams
    layout: StateLayout
    A: np.ndarray
    A_star: np.ndarray
    B: np.ndarray
    M: np.ndarray
    C_obs: np.ndarray
    stiffness: np.ndarray
    lumped_mass: np.ndarray
    boundary_weights: np.ndarray
    trace: np.ndarray
    channels: np.ndarray

    @property
    def K(self) -> int:
        return self.B.shape[1]

    @property
    def n(self) -> int:
        return self.layout.size

    @property
    def Q_gamma(self) -> np.ndarray:
        """Boundary quadrature form acting on the delta_t block."""
        q = np.zeros(self.n)
        q[self.layout.delta_t] = self.boundary_weights
        return np.diag(q)

    @cached_property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of M (block diagonal)."""
        lay, p = self.layout, self.params
        L = np.zeros((self.n, self.n))
        try:
            L[lay.phi, lay.phi] = np.linalg.cholesky(p.rho * self.stiffness)
        except np.linalg.LinAlgError as exc:
            raise AssemblyError("energy weight is not positive definite") from exc
        idx = np.arange(self.n)
        w = self.boundary_weights
        diag = np.concatenate([np.sqrt(p.rho / p.c**2 * self.lumped_mass),
                               np.sqrt(p.k * w), np.sqrt(p.m * w)])
        L[idx[lay.phi_t.start:], idx[lay.phi_t.start:]] = diag
        return L

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Map flat states (last axis) to energy coordinates."""
        return np.asarray(x) @ self.chol

    def unwhiten(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y)
        return scipy.linalg.solve_triangular(self.chol, y.T, lower=True, trans="T").T

    @cached_property
    def A_white(self) -> np.ndarray:
        L = self.chol
        LtA = L.T @ self.A
        # L^T A L^{-T} = (L^{-1} (L^T A)^T)^T
        return scipy.linalg.solve_triangular(L, LtA.T, lower=True).T

    @cached_property
    def B_white(self) -> np.ndarray:
        return self.chol.T @ self.B

    @cached_property
    def C_white(self) -> np.ndarray:
        return scipy.linalg.solve_triangular(self.chol, self.C_obs.T, lower=True).T

    def norm_M(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.whiten(x), axis=-1)

    def inner_M(self, x, y):
        return np.einsum("...i,ij,...j->...", x, self.M, y)

    def delta_t_values(self, y_white: np.ndarray) -> np.ndarray:
        """Boundary velocity from energy coordinates (M is diagonal on that block)."""
        sl = self.layout.delta_t
        return y_white[..., sl] / np.sqrt(self.params.m * self.boundary_weights)


def _stiffness_1d(n: int, h: float, periodic: bool = False):
    """P1 stiffness and lumped mass on ``n`` nodes (all nodes, no elimination)."""
    if periodic:
        K = (2 * np.eye(n) - np.roll(np.eye(n), 1, axis=1) - np.roll(np.eye(n), -1, axis=1)) / h
        return K, np.full(n, h)
    K = np.zeros((n, n))
    for e in range(n - 1):
        K[e:e + 2, e:e + 2] += np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    W = np.full(n, h)
    W[0] = W[-1] = h / 2
    return K, W


def channel_basis(weights: np.ndarray, K: int) -> np.ndarray:
    """Quadrature-orthonormal indicator channels: contiguous groups of gamma1 nodes."""
    nb = len(weights)
    E = np.zeros((nb, K))
    for k, group in enumerate(np.array_split(np.arange(nb), K)):
        E[group, k] = 1.0 / np.sqrt(weights[group].sum())
    return E


def assemble(grid: Grid, params: PhysParams, K: int | None = None) -> OperatorSet:
    nb = len(grid.gamma1)
    if K is None:
        K = nb
    if not 1 <= K <= max(nb, 0):
        raise ValueError(f"channel count K={K} must lie in [1, {nb}]")
    cfg = grid.config
    Kx, Wx = _stiffness_1d(cfg.nx, grid.hx)
    if grid.dimension == 1:
        Kfull, Wfull = Kx, Wx
    else:
        Ky, Wy = _stiffness_1d(cfg.ny, grid.hy, periodic=True)
        Kfull = np.kron(Ky, np.diag(Wx)) + np.kron(np.diag(Wy), Kx)
        Wfull = np.kron(Wy, Wx)
    stored = grid.stored
    Kst = Kfull[np.ix_(stored, stored)]
    Wst = Wfull[stored]
    n_phi = len(stored)
    pos = {int(node): i for i, node in enumerate(stored)}
    P = np.zeros((n_phi, nb))
    for j, node in enumerate(grid.gamma1):
        P[pos[int(node)], j] = 1.0
    w = grid.gamma1_weights.copy()
    rho, c, m, d, k = params.rho, params.c, params.m, params.d, params.k

    lay = StateLayout(n_phi, nb)
    n = lay.size
    I_phi, I_b = np.eye(n_phi), np.eye(nb)
    lap = -c**2 * Kst / Wst[:, None]
    couple = c**2 * (P * w) / Wst[:, None]

    A = np.zeros((n, n))
    A[lay.phi, lay.phi_t] = I_phi
    A[lay.phi_t, lay.phi] = lap
    A[lay.phi_t, lay.delta_t] = couple
    A[lay.delta, lay.delta_t] = I_b
    A[lay.delta_t, lay.phi_t] = -rho / m * P.T
    A[lay.delta_t, lay.delta] = -k / m * I_b
    A[lay.delta_t, lay.delta_t] = -d / m * I_b

    # adjoint block matrix with the off-diagonal signs flipped, damping kept
    A_star = np.zeros((n, n))
    A_star[lay.phi, lay.phi_t] = -I_phi
    A_star[lay.phi_t, lay.phi] = -lap
    A_star[lay.phi_t, lay.delta_t] = -couple
    A_star[lay.delta, lay.delta_t] = -I_b
    A_star[lay.delta_t, lay.phi_t] = rho / m * P.T
    A_star[lay.delta_t, lay.delta] = k / m * I_b
    A_star[lay.delta_t, lay.delta_t] = -d / m * I_b

    E = channel_basis(w, K)
    B = np.zeros((n, K))
    B[lay.delta_t] = -E / m

    M = scipy.linalg.block_diag(rho * Kst, np.diag(rho / c**2 * Wst), np.diag(k * w), np.diag(m * w))
    C_obs = np.zeros((nb, n))
    C_obs[:, lay.delta_t] = np.diag(np.sqrt(w))

    for arr in (A, A_star, B, M, C_obs, Kst, Wst, w, P, E):
        arr.setflags(write=False)
    ops = OperatorSet(grid, params, lay, A, A_star, B, M, C_obs, Kst, Wst, w, P, E)
    ops.chol  # fails loudly if M is not positive definite
    return ops


def energy(state: np.ndarray, ops: OperatorSet, t: float = 0.0) -> EnergySample:
    state = np.asarray(state, dtype=float)
    if state.shape != (ops.n,):
        raise ValueError(f"state has shape {state.shape}, expected ({ops.n},)")
    p = ops.params
    phi, phi_t, delta, delta_t = ops.layout.split(state)
    w = ops.boundary_weights
    grad2 = phi @ ops.stiffness @ phi
    acoustic = 0.5 * p.rho * (phi_t @ (ops.lumped_mass * phi_t) / p.c**2 + grad2)
    boundary = 0.5 * float(np.sum(w * (p.k * delta**2 + p.m * delta_t**2)))
    acoustic = float(acoustic)
    return EnergySample(t, acoustic, boundary, acoustic + boundary)


def _rel(defect: np.ndarray, scale: np.ndarray) -> float:
    s = np.linalg.norm(scale, 2)
    return float(np.linalg.norm(defect, 2) / s) if s > 0 else float(np.linalg.norm(defect, 2))


def dissipativity_audit(ops: OperatorSet) -> float:
    """Relative spectral-norm defect of ``sym(M A) = -d Q`` (worst of A and A*)."""
    dQ = ops.params.d * ops.Q_gamma
    out = 0.0
    for G in (ops.A, ops.A_star):
        MG = ops.M @ G
        out = max(out, _rel(0.5 * (MG + MG.T) + dQ, MG))
    return out


def adjoint_defect(ops: OperatorSet) -> float:
    """Relative defect of ``M A* = A^T M``."""
    rhs = ops.A.T @ ops.M
    return _rel(ops.M @ ops.A_star - rhs, rhs)


def skew_defect(ops: OperatorSet) -> float:
    """Relative size of ``sym(M A)``; zero iff A is M-skew."""
    MA = ops.M @ ops.A
    return _rel(0.5 * (MA + MA.T), MA)


def write_matrix_market(ops: OperatorSet, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in ("A", "A_star", "B", "M", "C_obs"):
        path = directory / f"{name}.mtx"
        scipy.io.mmwrite(str(path), sp.coo_matrix(getattr(ops, name)), precision=17)
        paths.append(path)
    return paths
