"""Seeded Monte Carlo ensembles and the statistical verdicts built on them.

Trajectories are grouped into fixed chunks of ``chunk_size`` consecutive
indices.  Chunks may run on several worker threads, but every chunk's result
depends only on its trajectory indices and the reduction runs in chunk
order, so aggregates do not depend on the worker count or on scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.special

from .analysis import LyapunovResult, cameron_martin_log_density, stationary_covariance
from .assembly import OperatorSet
from .dynamics import SimulationError, _n_steps, semigroup_norm, semigroup_white
from .noise import NoiseModel, psd_factor, white_transition

FLOOR_FACTOR = 3.0
HORIZON_FACTOR = 20.0
MIN_COMPLETION = 0.9
BOUNDED = ("tanh_energy", "tanh_linear", "ball")
QUANTITIES = ("energy2", "dissipation", "balance", "tanh_energy", "tanh_linear", "ball", "linear")


@dataclass(frozen=True, eq=False)
class ObservableSet:
    """Bounded test functionals (sup |f| <= 1) plus the raw linear functional.

    ``tanh_energy = tanh(E)``, ``tanh_linear = tanh(<g, X>_H)`` for a fixed
    random H-unit vector ``g``, ``ball`` a logistic-smoothed indicator of
    ``||X||_H < radius``; ``linear = <g, X>_H`` is unbounded and only used
    for the forgetting envelope.
    """

    g_white: np.ndarray
    radius: float
    softness: float

    @classmethod
    def build(cls, ops: OperatorSet, seed: int = 0, radius: float | None = None,
              softness: float | None = None) -> "ObservableSet":
        g = np.random.default_rng(seed).standard_normal(ops.n)
        g /= np.linalg.norm(g)
        if radius is None:
            ly = stationary_covariance(ops)
            radius = float(np.sqrt(np.trace(ly.Sigma_white))) if ly.exists else 1.0
        if softness is None:
            softness = 0.25 * radius
        return cls(g, float(radius), float(softness))

    @property
    def names(self) -> tuple[str, ...]:
        return BOUNDED

    def evaluate_white(self, Y: np.ndarray) -> dict[str, np.ndarray]:
        Y = np.atleast_2d(Y)
        sq = np.einsum("ij,ij->i", Y, Y)
        lin = Y @ self.g_white
        return {
            "tanh_energy": np.tanh(0.5 * sq),
            "tanh_linear": np.tanh(lin),
            "ball": scipy.special.expit((self.radius - np.sqrt(sq)) / self.softness),
            "linear": lin,
        }

    def evaluate(self, ops: OperatorSet, X: np.ndarray) -> dict[str, np.ndarray]:
        return self.evaluate_white(ops.whiten(X))


@dataclass(frozen=True)
class EnsembleConfig:
    n_traj: int
    T: float
    dt: float
    initials: tuple = ()
    base_seed: int = 0
    noise: bool = True
    chunk_size: int = 256
    workers: int = 1
    keep_final: bool = True
    observable_seed: int = 0
    ball_radius: float | None = None
    ball_softness: float | None = None

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.n_traj, self.T, self.dt, self.base_seed, self.noise, self.chunk_size,
                       self.observable_seed, self.ball_radius, self.ball_softness)).encode())
        for x in self.initials:
            h.update(np.ascontiguousarray(x, dtype=float).tobytes())
        return h.hexdigest()[:16]


@dataclass
class _Moments:
    """Count, mean and centred sum of squares; merged with Chan's formula."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "_Moments":
        # x has samples on axis 0; shifting by the first sample keeps
        # identical samples at exactly zero spread
        n = x.shape[0]
        d = x - x[0]
        mean_d = d.sum(axis=0) / n
        m2 = ((d - mean_d) ** 2).sum(axis=0)
        return cls(n, x[0] + mean_d, m2)

    def merge(self, other: "_Moments") -> "_Moments":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        return _Moments(n, mean, m2)

    def se(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.n - 1) / self.n)


@dataclass
class _ChunkResult:
    indices: np.ndarray
    failed: list
    quantities: _Moments
    state_mean: _Moments
    s2: np.ndarray
    s4: np.ndarray
    final: np.ndarray


@dataclass
class EnsembleStats:
    times: np.ndarray
    n_traj: int
    n_completed: int
    failed: list
    means: dict
    ses: dict
    mean_state: np.ndarray
    second_moment_white: np.ndarray
    fourth_white: np.ndarray = field(repr=False)
    final_white: np.ndarray | None = field(repr=False, default=None)
    initial: np.ndarray | None = field(repr=False, default=None)
    noise: bool = True
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)

    @property
    def completion(self) -> float:
        return self.n_completed / self.n_traj if self.n_traj else 0.0

    @property
    def usable(self) -> bool:
        return self.completion >= MIN_COMPLETION and self.n_completed >= 2

    def mean(self, name: str) -> np.ndarray:
        return self.means[name]

    def se(self, name: str) -> np.ndarray:
        return self.ses[name]

    def frobenius_se(self) -> float:
        """Standard error of the Frobenius norm of the second-moment estimate."""
        n = self.n_completed
        var = np.clip(self.fourth_white - self.second_moment_white**2, 0.0, None)
        return float(np.sqrt(var.sum() / max(n - 1, 1)))

    def second_moment(self, ops: OperatorSet) -> np.ndarray:
        from .analysis import _to_flat_cov

        return _to_flat_cov(ops, self.second_moment_white)


def _chunk_bounds(n_traj: int, chunk_size: int) -> list[np.ndarray]:
    return [np.arange(s, min(s + chunk_size, n_traj)) for s in range(0, n_traj, chunk_size)]


def _run_chunk(ops, P, G, y0, indices, init_index, n_steps, dt, noise, base_seed, obs, exclude=()):
    idx = np.array([i for i in indices if i not in exclude], dtype=int)
    c, n = len(idx), ops.n
    nt = n_steps + 1
    if c == 0:
        empty = _Moments(0, np.zeros((nt, len(QUANTITIES))), np.zeros((nt, len(QUANTITIES))))
        return _ChunkResult(idx, [], empty, _Moments(0, np.zeros((nt, n)), np.zeros((nt, n))),
                            np.zeros((n, n)), np.zeros((n, n)), np.zeros((0, n)))
    gens = [NoiseModel.for_trajectory(ops.K, base_seed, init_index, int(i)).generator() for i in idx] if noise else []
    d = ops.params.d
    m = ops.params.m
    trBMB = float(np.sum(ops.B_white**2)) if noise else 0.0
    sl = ops.layout.delta_t

    Y = np.tile(ops.whiten(y0), (c, 1))
    q = np.empty((nt, c, len(QUANTITIES)))
    state_shift = np.empty((nt, n))
    state_sum = np.empty((nt, n))
    alive = np.ones(c, dtype=bool)
    e0 = np.einsum("ij,ij->i", Y, Y)
    diss = np.zeros(c)
    flux_prev = np.sum(Y[:, sl] ** 2, axis=1) / m

    block = max(1, min(n_steps, 2_000_000 // max(c * n, 1)))
    Z = None
    for step in range(nt):
        if step > 0:
            if noise:
                j = (step - 1) % block
                if j == 0:
                    nb = min(block, n_steps - step + 1)
                    Z = np.stack([g.standard_normal((nb, n)) for g in gens], axis=1)
                Y = Y @ P.T + Z[j] @ G.T
            else:
                Y = Y @ P.T
            bad = ~np.all(np.isfinite(Y), axis=1)
            if bad.any():
                alive &= ~bad
                Y[bad] = 0.0
            flux = np.sum(Y[:, sl] ** 2, axis=1) / m
            diss = diss + 2.0 * d * 0.5 * dt * (flux + flux_prev)
            flux_prev = flux
        t = step * dt
        sq = np.einsum("ij,ij->i", Y, Y)
        vals = obs.evaluate_white(Y)
        q[step, :, 0] = sq
        q[step, :, 1] = diss
        q[step, :, 2] = sq - e0 + diss - t * trBMB
        for k, name in enumerate(QUANTITIES[3:], start=3):
            q[step, :, k] = vals[name]
        state_shift[step] = Y[0]
        state_sum[step] = (Y - Y[0]).sum(axis=0)
    failed = [int(i) for i in idx[~alive]]
    if failed:
        return failed
    quantities = _Moments.from_samples(q.transpose(1, 0, 2))
    state_mean = _Moments(c, state_shift + state_sum / c, np.zeros((nt, n)))
    Y2 = Y * Y
    return _ChunkResult(idx, [], quantities, state_mean, Y.T @ Y, Y2.T @ Y2, Y)


def run_ensemble(ops: OperatorSet, config: EnsembleConfig,
                 observables: ObservableSet | None = None) -> list[EnsembleStats]:
    """One ``EnsembleStats`` per initial condition in ``config.initials``.

    Trajectory ``i`` of initial condition ``a`` draws from the stream keyed
    ``(base_seed, a, i)``.  A trajectory that turns non-finite is dropped and
    listed in ``failed``; verdicts require ``usable`` statistics.
    """
    if config.n_traj < 1:
        raise ValueError("n_traj must be positive")
    if not config.initials:
        raise ValueError("at least one initial condition is required")
    n_steps = _n_steps(config.T, config.dt)
    dt = config.T / n_steps
    if observables is None:
        observables = ObservableSet.build(ops, config.observable_seed, config.ball_radius, config.ball_softness)
    if config.noise:
        P, S = white_transition(ops, dt)
        G = psd_factor(S)
    else:
        P, G = semigroup_white(ops, dt), None
    chunks = _chunk_bounds(config.n_traj, config.chunk_size)
    out = []
    for a, x0 in enumerate(config.initials):
        x0 = np.asarray(x0, dtype=float)

        def work(idx, a=a, x0=x0):
            res = _run_chunk(ops, P, G, x0, idx, a, n_steps, dt, config.noise, config.base_seed, observables)
            if isinstance(res, list):
                failed = res
                res = _run_chunk(ops, P, G, x0, idx, a, n_steps, dt, config.noise, config.base_seed,
                                 observables, exclude=set(failed))
                res.failed = failed
            return res

        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                results = list(pool.map(work, chunks))
        else:
            results = [work(idx) for idx in chunks]
        out.append(_reduce(results, ops, config, x0, a, dt, n_steps))
    return out


def _reduce(results, ops, config, x0, a, dt, n_steps) -> EnsembleStats:
    nt = n_steps + 1
    nq = len(QUANTITIES)
    qm = _Moments(0, np.zeros((nt, nq)), np.zeros((nt, nq)))
    sm = _Moments(0, np.zeros((nt, ops.n)), np.zeros((nt, ops.n)))
    s2 = np.zeros((ops.n, ops.n))
    s4 = np.zeros((ops.n, ops.n))
    failed, finals = [], []
    for r in results:
        qm = qm.merge(r.quantities)
        sm = sm.merge(r.state_mean)
        s2 = s2 + r.s2
        s4 = s4 + r.s4
        failed.extend(r.failed)
        finals.append(r.final)
    n = qm.n
    se = qm.se()
    means = {name: qm.mean[:, k] for k, name in enumerate(QUANTITIES)}
    ses = {name: se[:, k] for k, name in enumerate(QUANTITIES)}
    if n == 0:
        raise SimulationError("every trajectory of the ensemble failed")
    return EnsembleStats(
        times=np.arange(nt) * dt,
        n_traj=config.n_traj,
        n_completed=n,
        failed=failed,
        means=means,
        ses=ses,
        mean_state=ops.unwhiten(sm.mean),
        second_moment_white=s2 / n,
        fourth_white=s4 / n,
        final_white=np.concatenate(finals) if config.keep_final else None,
        initial=x0,
        noise=config.noise,
        config_hash=config.digest(),
        seeds={"base_seed": int(config.base_seed), "initial_index": a,
               "stream": f"(base_seed, {a}, trajectory)"},
    )


@dataclass(frozen=True)
class BalanceAudit:
    times: np.ndarray
    residual: np.ndarray
    se: np.ndarray
    within: np.ndarray
    max_mean_energy: float
    bound: float
    bounded: bool

    @property
    def passed(self) -> bool:
        return bool(np.all(self.within) and self.bounded)


def energy_balance_audit(stats: EnsembleStats, ops: OperatorSet, safety: float = 2.0,
                         factor: float = FLOOR_FACTOR, det_rtol: float = 1e-8) -> BalanceAudit:
    """Mean Ito balance ``E|X_t|^2 - E|x|^2 + 2d E int|delta_t|^2 - t tr(B*B)`` vs its MC error.

    The deterministic part of the tolerance, ``det_rtol`` times the energy
    scale, covers the noise-free case where the standard error vanishes.
    """
    res, se = stats.mean("balance"), stats.se("balance")
    e = stats.mean("energy2")
    scale = max(float(e[0]), float(np.max(e)), 1e-300)
    within = np.abs(res) <= factor * se + det_rtol * scale
    within[0] = res[0] == 0.0
    if stats.noise:
        alpha = stationary_covariance(ops).spectral_abscissa
        trBMB = float(np.sum(ops.B_white**2))
        bound = float(e[0] + safety * trBMB / (2 * abs(alpha))) if alpha < 0 else np.inf
    else:
        bound = float(e[0] * (1 + 1e-10))
    max_e = float(np.max(e))
    return BalanceAudit(stats.times, res, se, within, max_e, bound, bool(max_e <= bound))


@dataclass
class MixingReport:
    times: np.ndarray
    delta: dict
    floor: dict
    t_mix: float | None
    moment_errors: dict
    verdict: str
    reasons: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "t_mix": self.t_mix,
            "reasons": self.reasons,
            "final_delta": {k: float(v[-1]) for k, v in self.delta.items()},
            "final_floor": {k: float(v[-1]) for k, v in self.floor.items()},
            "moment_errors": self.moment_errors,
        }


def mixing_verdict(statsA: EnsembleStats, statsB: EnsembleStats, lyap: LyapunovResult | None,
                   ops: OperatorSet | None = None, floor_factor: float = FLOOR_FACTOR) -> MixingReport:
    if not np.array_equal(statsA.times, statsB.times):
        raise ValueError("ensembles were recorded on different time grids")
    times = statsA.times
    delta = {f: np.abs(statsA.mean(f) - statsB.mean(f)) for f in BOUNDED}
    floor = {f: floor_factor * np.hypot(statsA.se(f), statsB.se(f)) for f in BOUNDED}
    below = np.all([delta[f] <= floor[f] for f in BOUNDED], axis=0)
    hits = np.flatnonzero(below)
    t_mix = float(times[hits[0]]) if hits.size else None
    reasons = []
    moment_errors = {}

    if not (statsA.usable and statsB.usable):
        return MixingReport(times, delta, floor, t_mix, moment_errors, "INCONCLUSIVE",
                            ["fewer than 90% of trajectories completed"])
    if lyap is None or not lyap.exists:
        return MixingReport(times, delta, floor, t_mix, moment_errors, "INCONCLUSIVE",
                            ["undamped: no stationary covariance"])
    target = float(np.trace(lyap.Sigma_white))
    ok = True
    for label, s in (("A", statsA), ("B", statsB)):
        err = float(abs(s.mean("energy2")[-1] - target))
        tol = float(floor_factor * s.se("energy2")[-1])
        moment_errors[label] = {"error": err, "tolerance": tol}
        if err > tol:
            ok = False
            reasons.append(f"ensemble {label}: E|X_T|^2 misses tr(M Sigma_inf) by {err:.3g} > {tol:.3g}")
    sep0 = max(float(delta[f][0]) for f in BOUNDED)
    floorT = max(float(floor[f][-1]) for f in BOUNDED)
    if 0.0 < sep0 <= floorT:
        return MixingReport(times, delta, floor, t_mix, moment_errors, "INCONCLUSIVE",
                            reasons + ["noise floor exceeds the initial separation"])
    for f in BOUNDED:
        if delta[f][-1] > floor[f][-1]:
            ok = False
            reasons.append(f"{f}: delta {delta[f][-1]:.3g} above floor {floor[f][-1]:.3g} at T")
    return MixingReport(times, delta, floor, t_mix, moment_errors, "PASS" if ok else "FAIL", reasons)


def forgetting_envelope(statsA: EnsembleStats, statsB: EnsembleStats, ops: OperatorSet,
                        factor: float = FLOOR_FACTOR):
    """Linear-functional gap against ``||S(t)||_H ||x1 - x2||_H`` plus MC error.

    Returns ``(gap, bound, passed)``; the norm curve comes from dense
    matrix exponentials, independent of the ensemble stepping.
    """
    gap = np.abs(statsA.mean("linear") - statsB.mean("linear"))
    err = factor * np.hypot(statsA.se("linear"), statsB.se("linear"))
    dist = float(ops.norm_M(statsA.initial - statsB.initial))
    norms = np.array([semigroup_norm(ops, t) for t in statsA.times])
    bound = norms * dist + err + 1e-12 * dist
    return gap, bound, bool(np.all(gap <= bound))


def sample_transition(ops: OperatorSet, x, t: float, n: int, base_seed: int, index: int = 0) -> np.ndarray:
    """``n`` exact samples of ``X(t, x)`` in energy coordinates.

    Sample ``i`` uses the stream ``(base_seed, index, i)``, i.e. the same draws
    as trajectory ``i`` of initial condition ``index`` in a one-step ensemble.
    """
    P, S = white_transition(ops, t)
    G = psd_factor(S)
    Z = np.concatenate([NoiseModel.for_trajectory(ops.K, base_seed, index, i).generator()
                        .standard_normal((1, ops.n)) for i in range(n)])
    return ops.whiten(np.asarray(x, dtype=float)) @ P.T + Z @ G.T


def _mean_se(v: np.ndarray):
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


@dataclass(frozen=True)
class FellerCheck:
    t: float
    R_norm: float
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.lhs <= self.rhs))


def feller_lipschitz_check(ops: OperatorSet, t: float, pairs, n_samples: int, base_seed: int,
                           observables: ObservableSet, R_norm: float,
                           factor: float = FLOOR_FACTOR) -> FellerCheck:
    """``|M_t f(x1) - M_t f(x2)| <= ||R(t)|| ||x1 - x2|| + factor * SE`` for each pair and f."""
    lhs, rhs = [], []
    for p, (x1, x2) in enumerate(pairs):
        Y1 = sample_transition(ops, x1, t, n_samples, base_seed, index=2 * p + 1)
        Y2 = sample_transition(ops, x2, t, n_samples, base_seed, index=2 * p + 2)
        v1, v2 = observables.evaluate_white(Y1), observables.evaluate_white(Y2)
        dist = float(ops.norm_M(np.asarray(x1) - np.asarray(x2)))
        row_l, row_r = [], []
        for f in BOUNDED:
            m1, s1 = _mean_se(v1[f])
            m2, s2 = _mean_se(v2[f])
            row_l.append(abs(m1 - m2))
            row_r.append(R_norm * dist + factor * np.hypot(s1, s2))
        lhs.append(row_l)
        rhs.append(row_r)
    return FellerCheck(float(t), float(R_norm), np.array(lhs), np.array(rhs))


@dataclass(frozen=True)
class CameronMartinCheck:
    normalization: tuple
    weighted: tuple
    direct: tuple
    factor: float

    @property
    def normalization_ok(self) -> bool:
        m, s = self.normalization
        return abs(m - 1.0) <= self.factor * s

    @property
    def identity_ok(self) -> bool:
        (m1, s1), (m2, s2) = self.weighted, self.direct
        return abs(m1 - m2) <= self.factor * np.hypot(s1, s2)

    @property
    def passed(self) -> bool:
        return self.normalization_ok and self.identity_ok


def cameron_martin_check(ops: OperatorSet, t: float, x, n_samples: int, base_seed: int,
                         f=None, factor: float = FLOOR_FACTOR) -> CameronMartinCheck:
    """Importance-sampling identity ``E[F(t,x,Z) f(Z)] = E f(X(t,x))``, ``Z ~ X(t,0)``."""
    if f is None:
        obs = ObservableSet.build(ops)

        def f(Y):
            return obs.evaluate_white(Y)["tanh_linear"]

    Z = sample_transition(ops, np.zeros(ops.n), t, n_samples, base_seed, index=1)
    X = sample_transition(ops, x, t, n_samples, base_seed, index=2)
    F = np.exp(cameron_martin_log_density(ops, t, x, ops.unwhiten(Z)))
    return CameronMartinCheck(_mean_se(F), _mean_se(F * f(Z)), _mean_se(f(X)), factor)


def write_decay_csv(report: MixingReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "observable", "delta", "floor"])
        for f in BOUNDED:
            for t, dv, fv in zip(report.times, report.delta[f], report.floor[f]):
                w.writerow([repr(float(t)), f, repr(float(dv)), repr(float(fv))])


def write_report_json(report: MixingReport, path, extra: dict | None = None) -> None:
    doc = report.to_json()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
