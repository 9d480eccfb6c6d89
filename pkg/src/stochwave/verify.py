"""Verdict runners.  Each takes an ``ExperimentContext`` and returns a ``Verdict``."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import analysis, assembly, dynamics, ensemble
from .assembly import OperatorSet, assemble
from .config import VERDICTS, ExperimentConfig
from .domain import Grid, build_grid, check_geometric_condition
from .noise import white_transition

CONTRACTION_TIMES = (0.1, 1.0, 10.0)
CONTRACTION_STATES = 100
CONTRACTION_RTOL = 1e-10
CONSERVATION_RTOL = 1e-10
CROSSCHECK_RTOL = 1e-6
CONTROL_RESIDUAL = 1e-6
CONTROL_CT_MIN = 1e-8
INVARIANT_QT_TOL = 1e-6
MONOTONE_ATOL = 1e-12


@dataclass
class Verdict:
    name: str
    status: str
    metrics: dict = field(default_factory=dict)
    reasons: list = field(default_factory=list)
    tables: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.status == "PASS"

    def to_json(self) -> dict:
        return {"name": self.name, "status": self.status, "metrics": _jsonable(self.metrics),
                "reasons": list(self.reasons)}


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else repr(v)
    return v


def _status(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


class ExperimentContext:
    """Grid, operators and derived quantities for one config, built lazily."""

    def __init__(self, cfg: ExperimentConfig, seed: int | None = None, workers: int | None = None):
        self.cfg = cfg
        self.seed = cfg.run.seed if seed is None else int(seed)
        self.workers = cfg.run.workers if workers is None else int(workers)

    def stream_seed(self, verdict: str) -> int:
        # disjoint noise streams per verdict
        return self.seed * 1000 + VERDICTS.index(verdict)

    @cached_property
    def grid(self) -> Grid:
        return build_grid(self.cfg.domain.to_domain())

    @cached_property
    def ops(self) -> OperatorSet:
        return assemble(self.grid, self.cfg.physics.to_params(), self.cfg.physics.channels)

    @cached_property
    def lyapunov(self):
        return analysis.stationary_covariance(self.ops)

    @property
    def dt(self) -> float:
        return self.cfg.run.dt or dynamics.default_dt(self.ops, self.cfg.run.cfl)

    @property
    def L_over_c(self) -> float:
        return self.cfg.domain.length_x / self.cfg.physics.c

    def observables(self) -> ensemble.ObservableSet:
        a = self.cfg.analysis
        return ensemble.ObservableSet.build(self.ops, a.observable_seed, a.ball_radius, a.ball_softness)

    def initial_state(self, ops: OperatorSet | None = None, kind: str | None = None) -> np.ndarray:
        ops = ops or self.ops
        kind = kind or self.cfg.run.initial
        if kind == "zero":
            return np.zeros(ops.n)
        if kind == "random":
            return unit_state(ops, np.random.default_rng(self.seed))
        r = self.cfg.run
        x = ops.grid.coords[ops.grid.stored, 0]
        return ops.layout.pack(phi=np.exp(-(((x - r.bump_center) / r.bump_width) ** 2)))

    def ensemble_config(self, n_traj, T, dt, initials, verdict, noise=True, keep_final=True):
        a = self.cfg.analysis
        return ensemble.EnsembleConfig(n_traj=n_traj, T=T, dt=dt, initials=tuple(initials),
                                       base_seed=self.stream_seed(verdict), noise=noise,
                                       chunk_size=self.cfg.run.chunk_size, workers=self.workers,
                                       keep_final=keep_final, observable_seed=a.observable_seed,
                                       ball_radius=a.ball_radius, ball_softness=a.ball_softness)


def unit_state(ops: OperatorSet, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Random state(s) of unit energy norm, drawn isotropically in energy coordinates."""
    y = rng.standard_normal((size or 1, ops.n))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    x = ops.unwhiten(y)
    return x if size else x[0]


# -- individual verdicts ---------------------------------------------------------------------

def verdict_geometry(ctx: ExperimentContext) -> Verdict:
    d = ctx.cfg.domain
    x0 = np.zeros(ctx.grid.dimension)
    k = min(len(d.x0), x0.size)
    x0[:k] = d.x0[:k]
    rep = check_geometric_condition(ctx.grid, x0, d.c_geo)
    return Verdict("geometry", _status(rep.satisfied), {
        "x0": x0, "c_geo": rep.c_geo, "gamma0_max": rep.gamma0_max, "gamma1_min": rep.gamma1_min,
        "gamma0_violations": len(rep.gamma0_violations), "gamma1_violations": len(rep.gamma1_violations)})


def verdict_structural(ctx: ExperimentContext) -> Verdict:
    tol = ctx.cfg.analysis.audit_rtol
    ops = ctx.ops
    undamped = assemble(ctx.grid, dataclasses.replace(ctx.cfg.physics.to_params(), d=0.0),
                        ctx.cfg.physics.channels)
    m = {"dissipativity_defect": assembly.dissipativity_audit(ops),
         "adjoint_defect": assembly.adjoint_defect(ops),
         "skew_defect_d0": assembly.skew_defect(undamped),
         "noise_trace_defect": abs(float(np.sum(ops.B_white**2)) - ops.K / ops.params.m)
         / (ops.K / ops.params.m),
         "tolerance": tol}
    ok = all(m[k] <= tol for k in ("dissipativity_defect", "adjoint_defect", "skew_defect_d0"))
    return Verdict("structural", _status(ok), m)


def _energy_run(ctx: ExperimentContext, d: float | None = None):
    a = ctx.cfg.analysis
    grid = build_grid(ctx.cfg.domain.to_domain(a.energy_nx))
    params = ctx.cfg.physics.to_params()
    if d is not None:
        params = dataclasses.replace(params, d=d)
    ops = assemble(grid, params, ctx.cfg.physics.channels)
    T = a.energy_T or 4.0 * ctx.L_over_c
    dt = dynamics.default_dt(ops, ctx.cfg.run.cfl)
    n = max(1, int(round(T / dt)))
    x0 = ctx.initial_state(ops, "bump" if ctx.cfg.run.initial == "zero" else None)
    traj = dynamics.simulate(ops, x0, T, T / n)
    return ops, traj


def verdict_energy_law(ctx: ExperimentContext) -> Verdict:
    rtol = ctx.cfg.analysis.energy_rtol
    ops, traj = _energy_run(ctx)
    res = dynamics.energy_law_residual(traj, ops)
    E0 = float(traj.total[0])
    rel = float(abs(res[-1]) / E0)
    _, cons = _energy_run(ctx, d=0.0)
    drift = float(np.max(np.abs(cons.total - cons.total[0])) / cons.total[0])
    diss = dynamics.cumulative_dissipation(traj, ops)
    table = (["t", "energy", "dissipated", "residual"],
             [[t, e, q, r] for t, e, q, r in zip(traj.times, traj.total, diss, res)])
    m = {"nx": ops.grid.shape[1], "T": float(traj.times[-1]), "dt": float(traj.times[1]),
         "E0": E0, "relative_residual_T": rel, "max_relative_residual": float(np.max(np.abs(res)) / E0),
         "tolerance": rtol, "conservation_drift_d0": drift, "conservation_tolerance": CONSERVATION_RTOL}
    ok = rel <= rtol and drift <= CONSERVATION_RTOL
    return Verdict("energy_law", _status(ok), m, tables={"energy_residual": table})


def verdict_contraction(ctx: ExperimentContext) -> Verdict:
    ops = ctx.ops
    X = unit_state(ops, np.random.default_rng(ctx.seed), CONTRACTION_STATES)
    X *= np.random.default_rng(ctx.seed + 1).uniform(0.1, 10.0, (CONTRACTION_STATES, 1))
    worst = {}
    for t in CONTRACTION_TIMES:
        ratio = ops.norm_M(dynamics.propagate(ops, X, t)) / ops.norm_M(X)
        worst[str(t)] = float(ratio.max())
    ok = max(worst.values()) <= 1 + CONTRACTION_RTOL
    return Verdict("contraction", _status(ok), {"max_norm_ratio": worst, "tolerance": CONTRACTION_RTOL})


def _sweep(ctx: ExperimentContext):
    a = ctx.cfg.analysis
    ops = ctx.ops
    rows = []
    y0 = unit_state(ops, np.random.default_rng(ctx.seed))
    for T in a.horizons:
        est = analysis.observability_constant(ops, T, a.n_quad, a.quad_rtol)
        fb = analysis.strong_feller_bound(ops, T, a.pinv_rtol)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", analysis.RankDeficiencyWarning)
            ctl = analysis.null_control(ops, y0, T, a.null_control_steps, a.pinv_rtol)
        _, S = white_transition(ops, T)
        rows.append({"T": float(T), "C_T": est.C_T, "lambda_min_QT": float(np.linalg.eigvalsh(S)[0]),
                     "R_norm": fb.norm, "rank": ctl.rank, "rank_deficient": ctl.rank_deficient,
                     "control_residual": ctl.residual, "control_energy": ctl.energy, "est": est})
    return rows


def _sweep_table(rows):
    keys = ["T", "C_T", "lambda_min_QT", "R_norm", "rank", "rank_deficient", "control_residual"]
    return keys, [[r[k] for k in keys] for r in rows]


def observation_crosscheck(ops: OperatorSet, est: analysis.ObservabilityEstimate, steps: int = 4096) -> float:
    """Relative gap between C_T and the simulated observation energy of the minimizer."""
    traj = dynamics.simulate(ops, est.minimizer, est.T, est.T / steps)
    sim = dynamics.observation_energy(traj, ops, "simpson")
    E0 = float(traj.total[0])
    return abs(sim / E0 - est.C_T) / est.C_T


def verdict_observability(ctx: ExperimentContext, rows=None) -> Verdict:
    rows = rows or _sweep(ctx)
    T0 = 4.0 * ctx.L_over_c
    CT = np.array([r["C_T"] for r in rows])
    Ts = np.array([r["T"] for r in rows])
    late = Ts >= T0 - 1e-12
    positive = bool(late.any() and np.all(CT[late] > 0))
    steps = np.diff(CT)
    monotone = bool(np.all(steps >= -MONOTONE_ATOL * max(CT.max(), 1.0)))
    checks = {str(r["T"]): observation_crosscheck(ctx.ops, r["est"]) for r in rows if r["T"] >= T0 - 1e-12}
    worst = max(checks.values()) if checks else np.inf
    m = {"threshold_T": T0, "C_T": dict(zip(map(str, Ts), CT)), "positive_after_threshold": positive,
         "nondecreasing": monotone, "crosscheck_rel": checks, "crosscheck_tolerance": CROSSCHECK_RTOL}
    ok = positive and monotone and worst <= CROSSCHECK_RTOL
    return Verdict("observability", _status(ok), m, tables={"observability_sweep": _sweep_table(rows)})


def saturation_horizon(ctx: ExperimentContext) -> float | None:
    """Smallest sweep horizon at which the exact Gramian has full numerical rank."""
    a = ctx.cfg.analysis
    for T in a.horizons:
        g = analysis.controllability_gramian(ctx.ops, T, method="exact", rank_rtol=a.pinv_rtol)
        if g.full_rank:
            return float(T)
    return None


def verdict_null_control(ctx: ExperimentContext, rows=None) -> Verdict:
    rows = rows or _sweep(ctx)
    T_sat = saturation_horizon(ctx)
    reasons = []
    worst = 0.0
    for r in rows:
        if r["C_T"] > CONTROL_CT_MIN:
            worst = max(worst, r["control_residual"])
            if r["control_residual"] > CONTROL_RESIDUAL:
                reasons.append(f"T={r['T']}: residual {r['control_residual']:.3g}")
        if T_sat is not None and r["T"] < T_sat and not r["rank_deficient"]:
            reasons.append(f"T={r['T']} below saturation but not flagged")
    flagged = [r["T"] for r in rows if r["rank_deficient"]]
    m = {"kalman_rank": analysis.kalman_rank(ctx.ops), "n": ctx.ops.n, "saturation_T": T_sat,
         "flagged_T": flagged, "max_residual_observable": worst, "tolerance": CONTROL_RESIDUAL,
         "residuals": {str(r["T"]): r["control_residual"] for r in rows}}
    return Verdict("null_control", _status(not reasons), m, reasons,
                   tables={"null_control": _sweep_table(rows)})


def verdict_gramian_trace(ctx: ExperimentContext) -> Verdict:
    a = ctx.cfg.analysis
    ops = ctx.ops
    T = a.gramian_T
    g = analysis.controllability_gramian(ops, T, method="exact", rank_rtol=a.rank_rtol)
    tr = float(np.trace(g.Q_white))
    cfg = ctx.ensemble_config(a.balance_n_traj, T, T, [np.zeros(ops.n)], "gramian_trace", keep_final=False)
    st = ensemble.run_ensemble(ops, cfg)[0]
    mc, se = float(st.mean("energy2")[-1]), float(st.se("energy2")[-1])
    ok = abs(mc - tr) <= a.floor_factor * se and st.usable
    return Verdict("gramian_trace", _status(ok), {
        "T": T, "trace_MQT": tr, "mc_mean": mc, "mc_se": se, "z": (mc - tr) / se,
        "n_traj": st.n_completed, "gramian_rank": g.rank})


def verdict_energy_balance(ctx: ExperimentContext) -> Verdict:
    a = ctx.cfg.analysis
    ops = ctx.ops
    T = a.balance_T
    dt = dynamics.default_dt(ops, a.balance_cfl)
    dt = T / max(1, int(round(T / dt)))
    cfg = ctx.ensemble_config(a.balance_n_traj, T, dt, [np.zeros(ops.n)], "energy_balance", keep_final=False)
    st = ensemble.run_ensemble(ops, cfg)[0]
    audit = ensemble.energy_balance_audit(st, ops, a.safety_factor, a.floor_factor)
    z = np.abs(audit.residual[1:]) / np.where(audit.se[1:] > 0, audit.se[1:], np.inf)
    table = (["t", "mean_energy2", "residual", "se"],
             [[t, e, r, s] for t, e, r, s in zip(st.times, st.mean("energy2"), audit.residual, audit.se)])
    return Verdict("energy_balance", _status(audit.passed and st.usable), {
        "T": T, "dt": dt, "n_traj": st.n_completed, "max_abs_z": float(z.max()),
        "fraction_within": float(np.mean(audit.within)), "max_mean_energy2": audit.max_mean_energy,
        "plateau_bound": audit.bound, "bounded": audit.bounded}, tables={"energy_balance": table})


def mixing_horizon(ctx: ExperimentContext) -> float | None:
    alpha = ctx.lyapunov.spectral_abscissa
    return ctx.cfg.analysis.horizon_factor / abs(alpha) if ctx.lyapunov.exists else None


def verdict_invariant_measure(ctx: ExperimentContext) -> Verdict:
    a = ctx.cfg.analysis
    ops = ctx.ops
    ly = ctx.lyapunov
    T = mixing_horizon(ctx)
    if T is None:
        return Verdict("invariant_measure", "INCONCLUSIVE", {}, ["undamped: no stationary covariance"])
    cfg = ctx.ensemble_config(a.invariant_n_traj, T, T, [np.zeros(ops.n)], "invariant_measure",
                              keep_final=False)
    st = ensemble.run_ensemble(ops, cfg)[0]
    err = float(np.linalg.norm(st.second_moment_white - ly.Sigma_white))
    se = st.frobenius_se()
    _, S_T = white_transition(ops, T)
    gap = float(np.linalg.norm(S_T - ly.Sigma_white, 2) / np.linalg.norm(ly.Sigma_white, 2))
    ok = err <= a.floor_factor * se and gap <= INVARIANT_QT_TOL and st.usable
    return Verdict("invariant_measure", _status(ok), {
        "T": T, "spectral_abscissa": ly.spectral_abscissa, "lyapunov_residual": ly.residual,
        "frobenius_error": err, "frobenius_se": se, "QT_gap_rel": gap, "n_traj": st.n_completed})


def mixing_initials(ctx: ExperimentContext):
    x1 = np.zeros(ctx.ops.n)
    x2 = unit_state(ctx.ops, np.random.default_rng(ctx.seed + 7))
    return x1, x2


def run_mixing(ctx: ExperimentContext):
    a = ctx.cfg.analysis
    ops = ctx.ops
    T = mixing_horizon(ctx) or a.horizon_factor * ctx.L_over_c
    cfg = ctx.ensemble_config(a.mixing_n_traj, T, T / a.mixing_steps, mixing_initials(ctx), "mixing",
                              keep_final=False)
    sA, sB = ensemble.run_ensemble(ops, cfg)
    report = ensemble.mixing_verdict(sA, sB, ctx.lyapunov, ops, a.floor_factor)
    gap, bound, env_ok = ensemble.forgetting_envelope(sA, sB, ops, a.floor_factor)
    return report, (gap, bound, env_ok), cfg


def verdict_mixing(ctx: ExperimentContext) -> Verdict:
    report, (gap, bound, env_ok), cfg = run_mixing(ctx)
    status = report.verdict
    reasons = list(report.reasons)
    if status == "PASS" and not env_ok:
        status = "FAIL"
        reasons.append("linear-functional gap exceeds the semigroup-norm envelope")
    rows = []
    for f in ensemble.BOUNDED:
        rows += [[t, f, dv, fv] for t, dv, fv in zip(report.times, report.delta[f], report.floor[f])]
    env = [[t, g, b] for t, g, b in zip(report.times, gap, bound)]
    m = report.to_json()
    m.pop("verdict")
    m.pop("reasons")
    m.update({"T": float(report.times[-1]), "n_traj": cfg.n_traj, "envelope_ok": env_ok,
              "separation_M": float(ctx.ops.norm_M(np.subtract(*mixing_initials(ctx)))),
              "ensemble_hash": cfg.digest()})
    return Verdict("mixing", status, m, reasons, tables={
        "decay": (["t", "observable", "delta", "floor"], rows),
        "forgetting_envelope": (["t", "gap", "bound"], env)})


def feller_pairs(ctx: ExperimentContext):
    rng = np.random.default_rng(ctx.seed + 11)
    ops = ctx.ops
    A = unit_state(ops, rng, ctx.cfg.analysis.feller_pairs)
    B = unit_state(ops, rng, ctx.cfg.analysis.feller_pairs)
    return list(zip(A, B))


def verdict_strong_feller(ctx: ExperimentContext) -> Verdict:
    a = ctx.cfg.analysis
    ops = ctx.ops
    t = a.feller_time
    fb = analysis.strong_feller_bound(ops, t, a.pinv_rtol)
    if not np.isfinite(fb.norm):
        return Verdict("strong_feller", "FAIL", {"t": t, "rank": fb.rank},
                       [f"Q_t rank deficient at t={t}"])
    chk = ensemble.feller_lipschitz_check(ops, t, feller_pairs(ctx), a.feller_samples,
                                         ctx.stream_seed("strong_feller"), ctx.observables(), fb.norm,
                                         a.floor_factor)
    return Verdict("strong_feller", _status(chk.passed), {
        "t": t, "R_norm": fb.norm, "condition_Qt": fb.condition,
        "max_lhs": float(chk.lhs.max()), "min_slack": float((chk.rhs - chk.lhs).min()),
        "pairs": len(chk.lhs)})


def verdict_cameron_martin(ctx: ExperimentContext) -> Verdict:
    a = ctx.cfg.analysis
    ops = ctx.ops
    x = unit_state(ops, np.random.default_rng(ctx.seed + 13))
    obs = ctx.observables()
    chk = ensemble.cameron_martin_check(ops, a.cm_time, x, a.cm_samples, ctx.stream_seed("cameron_martin"),
                                        lambda Y: obs.evaluate_white(Y)["tanh_linear"], a.floor_factor)
    return Verdict("cameron_martin", _status(chk.passed), {
        "t": a.cm_time, "normalization": chk.normalization, "weighted": chk.weighted,
        "direct": chk.direct, "normalization_ok": chk.normalization_ok, "identity_ok": chk.identity_ok})


RUNNERS = {
    "geometry": verdict_geometry,
    "structural": verdict_structural,
    "energy_law": verdict_energy_law,
    "contraction": verdict_contraction,
    "observability": verdict_observability,
    "null_control": verdict_null_control,
    "gramian_trace": verdict_gramian_trace,
    "energy_balance": verdict_energy_balance,
    "invariant_measure": verdict_invariant_measure,
    "mixing": verdict_mixing,
    "strong_feller": verdict_strong_feller,
    "cameron_martin": verdict_cameron_martin,
}


def _guarded(name, fn, *args) -> Verdict:
    try:
        return fn(*args)
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        return Verdict(name, "FAIL", {}, [f"{type(exc).__name__}: {exc}"])


def run_verdicts(ctx: ExperimentContext, names=None) -> list[Verdict]:
    names = list(ctx.cfg.analysis.verdicts if names is None else names)
    rows = _sweep(ctx) if {"observability", "null_control"} & set(names) else None
    out = []
    for name in names:
        if name in ("observability", "null_control"):
            out.append(_guarded(name, RUNNERS[name], ctx, rows))
        else:
            out.append(_guarded(name, RUNNERS[name], ctx))
    return out
