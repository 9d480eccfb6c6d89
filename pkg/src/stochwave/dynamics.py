"""Semigroup action, adjoint semigroup and sampled trajectories."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import EnergySample, OperatorSet
from .noise import NoiseModel, exact_increment_covariance, psd_factor

DENSE_LIMIT = 2000
CFL = 0.25


class PropagationError(RuntimeError):
    pass


class SimulationError(RuntimeError):
    pass


def default_dt(ops: OperatorSet, cfl: float = CFL) -> float:
    return cfl * ops.grid.h / ops.params.c


@lru_cache(maxsize=256)
def _expm_white(ops: OperatorSet, t: float) -> np.ndarray:
    P = scipy.linalg.expm(ops.A_white * t)
    if not np.all(np.isfinite(P)):
        raise PropagationError(f"matrix exponential is not finite at t={t}")
    P.setflags(write=False)
    return P


def semigroup_white(ops: OperatorSet, t: float) -> np.ndarray:
    """``e^{A t}`` in energy coordinates (an orthogonal matrix when d = 0)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return _expm_white(ops, float(t))


def semigroup_norm(ops: OperatorSet, t: float) -> float:
    """Operator norm of ``S(t)`` in the energy norm."""
    return float(np.linalg.norm(semigroup_white(ops, t), 2))


def _apply(ops: OperatorSet, state, t: float, adjoint: bool) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be nonnegative")
    x = np.asarray(state, dtype=float)
    if t == 0:
        return x.copy()
    if ops.n > DENSE_LIMIT:
        G = ops.A_star if adjoint else ops.A
        out = spla.expm_multiply(sp.csr_matrix(G) * t, x.T).T
    else:
        P = semigroup_white(ops, t)
        y = ops.whiten(x)
        # row-vector convention: y_new = y @ P^T for S, y @ P for S*
        out = ops.unwhiten(y @ (P if adjoint else P.T))
    if not np.all(np.isfinite(out)):
        raise PropagationError("exponential action produced non-finite values")
    return out


def propagate(ops: OperatorSet, state, t: float) -> np.ndarray:
    """``S(t) x``; accepts a single state or a stack of states along axis 0."""
    return _apply(ops, state, t, adjoint=False)


def propagate_adjoint(ops: OperatorSet, state, t: float) -> np.ndarray:
    """``S*(t) x`` for the M-adjoint generator ``A_star``."""
    return _apply(ops, state, t, adjoint=True)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    acoustic: np.ndarray
    boundary: np.ndarray
    boundary_velocity: np.ndarray
    seed: dict = field(default_factory=dict)

    @property
    def total(self) -> np.ndarray:
        return self.acoustic + self.boundary

    def energy_sample(self, i: int) -> EnergySample:
        return EnergySample(float(self.times[i]), float(self.acoustic[i]),
                            float(self.boundary[i]), float(self.total[i]))

    @property
    def energy_series(self) -> list[EnergySample]:
        return [self.energy_sample(i) for i in range(len(self.times))]


def _integrate(y: np.ndarray, times: np.ndarray, rule: str) -> float:
    if rule == "trapezoid":
        return float(np.trapezoid(y, times))
    if rule == "simpson":
        import scipy.integrate

        return float(scipy.integrate.simpson(y, x=times))
    raise ValueError(f"unknown quadrature rule {rule!r}")


def observation_energy(traj: Trajectory, ops: OperatorSet, rule: str = "trapezoid") -> float:
    """``int_0^T int_Gamma1 delta_t^2`` from the recorded boundary velocity."""
    flux = traj.boundary_velocity**2 @ ops.boundary_weights
    return _integrate(flux, traj.times, rule)


def cumulative_dissipation(traj: Trajectory, ops: OperatorSet) -> np.ndarray:
    """``d int_0^t int_Gamma1 delta_t^2`` at every recorded time (trapezoid)."""
    flux = ops.params.d * (traj.boundary_velocity**2 @ ops.boundary_weights)
    dt = np.diff(traj.times)
    return np.concatenate([[0.0], np.cumsum(0.5 * dt * (flux[1:] + flux[:-1]))])


def energy_law_residual(traj: Trajectory, ops: OperatorSet) -> np.ndarray:
    """``E(t) - E(0) + d int_0^t int delta_t^2``; zero for the noise-free system."""
    E = traj.total
    return E - E[0] + cumulative_dissipation(traj, ops)


def _n_steps(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return n


def simulate(ops: OperatorSet, initial, T: float, dt: float | None = None,
             noise: NoiseModel | None = None) -> Trajectory:
    """Sample the mild solution on the grid ``0, dt, ..., T``.

    With ``noise=None`` this is exact semigroup stepping; otherwise each step
    adds an exact Gaussian increment ``N(0, Sigma_dt)``.
    """
    if dt is None:
        dt = default_dt(ops)
    n_steps = _n_steps(T, dt)
    dt = T / n_steps
    x0 = np.asarray(initial, dtype=float)
    if x0.shape != (ops.n,):
        raise ValueError(f"initial state has shape {x0.shape}, expected ({ops.n},)")

    seed_meta = {}
    if noise is None:
        P = semigroup_white(ops, dt)
        G = None
    else:
        inc = exact_increment_covariance(ops, dt)
        P, G = inc.mean_map_white, psd_factor(inc.cov_white)
        seed_meta = noise.metadata()
        z = noise.generator().standard_normal((n_steps, ops.n))

    Y = np.empty((n_steps + 1, ops.n))
    Y[0] = ops.whiten(x0)
    for i in range(n_steps):
        y = P @ Y[i]
        if G is not None:
            y += G @ z[i]
        if not np.all(np.isfinite(y)):
            raise SimulationError(f"non-finite state at step {i + 1} (t={(i + 1) * dt:.6g})")
        Y[i + 1] = y
    X = ops.unwhiten(Y)
    lay, p, w = ops.layout, ops.params, ops.boundary_weights
    phi, phi_t, delta, delta_t = lay.split(X)
    acoustic = 0.5 * p.rho * (np.einsum("ti,ij,tj->t", phi, ops.stiffness, phi)
                              + (phi_t**2 @ ops.lumped_mass) / p.c**2)
    boundary = 0.5 * ((p.k * delta**2 + p.m * delta_t**2) @ w)
    times = np.arange(n_steps + 1) * dt
    return Trajectory(times, X, acoustic, boundary, delta_t.copy(), seed_meta)


def write_energy_csv(traj: Trajectory, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "acoustic", "boundary", "total"])
        for t, a, b, s in zip(traj.times, traj.acoustic, traj.boundary, traj.total):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(b)), repr(float(s))])


SNAPSHOT_MAGIC = b"SWSNAP\x00\x01"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sIQQ4s")


def write_snapshots(traj: Trajectory, path) -> None:
    """Binary dump: header (magic, version, n_times, n_state, dtype) + times + states."""
    states = np.ascontiguousarray(traj.states, dtype="<f8")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, states.shape[0], states.shape[1], b"f8  "))
        fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
        fh.write(states.tobytes())


def read_snapshots(path):
    data = Path(path).read_bytes()
    magic, version, nt, n, dtype = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file")
    if version != SNAPSHOT_VERSION or dtype.strip() != b"f8":
        raise ValueError(f"unsupported snapshot version {version} / dtype {dtype!r}")
    off = _HEADER.size
    times = np.frombuffer(data, "<f8", nt, off)
    states = np.frombuffer(data, "<f8", nt * n, off + 8 * nt).reshape(nt, n)
    return times.copy(), states.copy()
