"""Truncated boundary Wiener process and exact Gaussian increments of the linear system."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg

from .assembly import OperatorSet

# Van Loan base steps are taken with ||A|| * tau below this; the result is
# then doubled up to the requested horizon
_VANLOAN_STEP = 0.5


@dataclass
class NoiseModel:
    """Counter-based stream of Gaussian draws.

    Every call that consumes randomness builds a Philox generator keyed by
    ``(seed, stream, counter)`` and then advances ``counter`` by one, so a
    recorded ``(seed, stream, counter)`` triple replays bit-exactly.
    ``stream`` is the jump-ahead index (one per trajectory).
    """

    K: int
    seed: int = 0
    stream: tuple[int, ...] = ()
    counter: int = 0

    @classmethod
    def for_trajectory(cls, K: int, base_seed: int, *index: int) -> "NoiseModel":
        return cls(K, base_seed, tuple(int(i) for i in index))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1),
                                    spawn_key=(*self.stream, self.counter))
        self.counter += 1
        return np.random.Generator(np.random.Philox(ss))

    def metadata(self) -> dict:
        return {"seed": int(self.seed), "stream": list(self.stream), "counter": int(self.counter)}


def sample_brownian_increments(model: NoiseModel, dt: float, n_steps: int) -> np.ndarray:
    """``n_steps`` i.i.d. N(0, dt I_K) increments of the K channel Brownian motions."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    z = model.generator().standard_normal((n_steps, model.K))
    return np.sqrt(dt) * z


@dataclass(frozen=True)
class IncrementCovariance:
    """Exact one-step law: ``X(t+dt) = mean_map @ X(t) + eta``, ``eta ~ N(0, cov)``.

    All matrices are in flat (stored) coordinates.
    """

    dt: float
    mean_map: np.ndarray
    cov: np.ndarray
    cov_white: np.ndarray = field(repr=False)
    mean_map_white: np.ndarray = field(repr=False)

    def factor_white(self) -> np.ndarray:
        return psd_factor(self.cov_white)


def psd_factor(S: np.ndarray) -> np.ndarray:
    """G with G G^T = S, clipping roundoff-negative eigenvalues to zero."""
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(lam, 0.0, None))


def _van_loan(A: np.ndarray, BBt: np.ndarray, t: float):
    n = A.shape[0]
    Z = np.zeros((2 * n, 2 * n))
    Z[:n, :n] = -A
    Z[:n, n:] = BBt
    Z[n:, n:] = A.T
    F = scipy.linalg.expm(Z * t)
    Phi = F[n:, n:].T
    S = Phi @ F[:n, n:]
    return Phi, 0.5 * (S + S.T)


def gaussian_convolution(A: np.ndarray, BBt: np.ndarray, t: float):
    """``(e^{At}, int_0^t e^{As} BB^T e^{A^T s} ds)`` by Van Loan plus exact doubling.

    A single augmented exponential over a long horizon cancels catastrophically
    when A has strongly damped modes (the block ``e^{-At}`` blows up), so the
    augmented exponential is only used on a short base interval and the
    Chapman-Kolmogorov identity ``S_{2t} = P S_t P^T + S_t`` does the rest.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    n = A.shape[0]
    if t == 0:
        return np.eye(n), np.zeros((n, n))
    scale = np.linalg.norm(A, 1) * t
    j = max(0, int(np.ceil(np.log2(scale / _VANLOAN_STEP)))) if scale > 0 else 0
    P, S = _van_loan(A, BBt, t / 2**j)
    for _ in range(j):
        S = P @ S @ P.T + S
        S = 0.5 * (S + S.T)
        P = P @ P
    return P, S


@lru_cache(maxsize=128)
def _white_law(ops: OperatorSet, t: float):
    P, S = gaussian_convolution(ops.A_white, ops.B_white @ ops.B_white.T, t)
    P.setflags(write=False)
    S.setflags(write=False)
    return P, S


def white_transition(ops: OperatorSet, t: float):
    """Cached ``(Phi_white(t), Sigma_white(t))`` in energy coordinates."""
    return _white_law(ops, float(t))


def exact_increment_covariance(ops: OperatorSet, dt: float) -> IncrementCovariance:
    if not dt > 0:
        raise ValueError("dt must be positive")
    P, S = white_transition(ops, dt)
    L = ops.chol
    Linv = scipy.linalg.solve_triangular(L, np.eye(ops.n), lower=True)
    # x = L^{-T} y:  Phi = L^{-T} P L^T,  Sigma = L^{-T} S L^{-1}
    Phi = Linv.T @ P @ L.T
    cov = Linv.T @ S @ Linv
    return IncrementCovariance(float(dt), Phi, 0.5 * (cov + cov.T), S, P)
