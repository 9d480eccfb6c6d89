"""Acceptance criteria, one test per criterion.

Each test re-derives its verdict from the raw metrics in the verify-all
manifest (not just the status string) and appends one PASS/FAIL line to the
summary printed at the end of the pytest run.
"""

import json

import numpy as np
import pytest
import scipy.linalg

from stochwave import cli
from stochwave.config import load_config, reference_config_path
from stochwave.verify import ExperimentContext

import conftest

CONFIGS = ("reference_1d", "reference_2d")


def record(k: int, name: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {k:2d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def run_verify_all(config: str, out, *extra) -> tuple[int, dict, bytes]:
    code = cli.main(["verify-all", str(reference_config_path(config)), "--out-dir", str(out), *extra])
    raw = (out / "manifest.json").read_bytes()
    return code, json.loads(raw), raw


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    out = {}
    for name in CONFIGS:
        code, man, raw = run_verify_all(name, tmp_path_factory.mktemp(name))
        out[name] = {"code": code, "raw": raw, "v": {v["name"]: v for v in man["verdicts"]}}
    return out


def metrics(runs, verdict, config="reference_1d"):
    return runs[config]["v"][verdict]["metrics"]


@pytest.fixture(scope="module")
def contexts():
    return {name: ExperimentContext(load_config(reference_config_path(name))) for name in CONFIGS}


def test_criterion_01_structural_identities(runs, contexts):
    worst = 0.0
    for name in CONFIGS:
        m = metrics(runs, "structural", name)
        worst = max(worst, m["dissipativity_defect"], m["adjoint_defect"], m["skew_defect_d0"])
        # independent check: x^T M A x is minus the friction power on gamma1
        ops = contexts[name].ops
        X = np.random.default_rng(1).standard_normal((50, ops.n))
        power = np.einsum("ij,jk,ik->i", X, ops.M @ ops.A, X)
        friction = -ops.params.d * (X[:, ops.layout.delta_t] ** 2) @ ops.boundary_weights
        worst = max(worst, float(np.max(np.abs(power - friction)) / np.max(np.abs(friction))))
    record(1, "structural identities", worst <= 1e-12, f"max relative defect {worst:.1e} <= 1e-12, 1D and 2D")


def test_criterion_02_energy_law(runs):
    ok, parts = True, []
    for name in CONFIGS:
        m = metrics(runs, "energy_law", name)
        h = 1.0 / (m["nx"] - 1)
        ok &= m["relative_residual_T"] <= 1e-6 and m["conservation_drift_d0"] <= 1e-10
        ok &= m["dt"] == pytest.approx(0.25 * h)
        parts.append(f"{name[-2:]}: residual {m['relative_residual_T']:.1e}, d=0 drift {m['conservation_drift_d0']:.1e}")
    record(2, "deterministic energy law", ok, "; ".join(parts))


def test_criterion_03_contraction(runs, contexts):
    m = metrics(runs, "contraction")
    worst = max(m["max_norm_ratio"].values())
    # dense expm oracle on 100 fresh states per time, both configs
    for ctx in contexts.values():
        ops = ctx.ops
        X = np.random.default_rng(3).standard_normal((100, ops.n))
        for t in (0.1, 1.0, 10.0):
            Y = X @ scipy.linalg.expm(ops.A * t).T
            worst = max(worst, float(np.max(ops.norm_M(Y) / ops.norm_M(X))))
    record(3, "semigroup contraction", worst <= 1 + 1e-10, f"max ||S(t)x||/||x|| = {worst:.12f}")


def test_criterion_04_observability(runs):
    m = metrics(runs, "observability")
    T = np.array([float(k) for k in m["C_T"]])
    C = np.array(list(m["C_T"].values()))
    order = np.argsort(T)
    T, C = T[order], C[order]
    positive = bool(np.all(C[T >= m["threshold_T"]] > 0))
    monotone = bool(np.all(np.diff(C) >= -1e-12))
    cross = max(m["crosscheck_rel"].values())
    ok = len(T) == 10 and m["threshold_T"] == 4.0 and positive and monotone and cross <= 1e-6
    record(4, "observability", ok, f"C_T(4.5) = {C[T == 4.5][0]:.3f}, monotone over {len(T)} points, "
                                   f"cross-check {cross:.1e} <= 1e-6")


def test_criterion_05_null_control(runs):
    obs = metrics(runs, "observability")["C_T"]
    m = metrics(runs, "null_control")
    reach = [T for T, c in obs.items() if c > 1e-8]
    worst = max(m["residuals"][T] for T in reach)
    below = sorted(float(T) for T in m["residuals"] if float(T) < m["saturation_T"])
    ok = worst <= 1e-6 and sorted(m["flagged_T"]) == below and len(below) > 0
    record(5, "observability implies null control", ok,
           f"max residual {worst:.1e} over {len(reach)} horizons, flagged {below} below T_sat = {m['saturation_T']}")


def test_criterion_06_gramian_trace(runs):
    m = metrics(runs, "gramian_trace")
    z = (m["mc_mean"] - m["trace_MQT"]) / m["mc_se"]
    ok = abs(z) <= 3 and m["n_traj"] == 1000
    record(6, "gramian trace", ok, f"tr(M Q_T) = {m['trace_MQT']:.4f}, MC {m['mc_mean']:.4f}, z = {z:+.2f}")


def test_criterion_07_energy_balance(runs):
    ok, parts = True, []
    for name in CONFIGS:
        m = metrics(runs, "energy_balance", name)
        ok &= (m["fraction_within"] == 1.0 and m["max_abs_z"] <= 3 and m["bounded"]
               and m["max_mean_energy2"] <= m["plateau_bound"] and m["n_traj"] == 1000)
        parts.append(f"{name[-2:]}: max |z| {m['max_abs_z']:.2f}")
    record(7, "energy balance", ok, "; ".join(parts) + ", mean energy bounded")


def test_criterion_08_invariant_measure(runs):
    m = metrics(runs, "invariant_measure")
    horizon = 20 / abs(m["spectral_abscissa"])
    ok = (m["frobenius_error"] <= 3 * m["frobenius_se"] and m["QT_gap_rel"] <= 1e-6
          and m["n_traj"] == 10_000 and m["T"] == pytest.approx(horizon))
    record(8, "invariant measure", ok, f"Frobenius error {m['frobenius_error']:.4f} vs 3 se "
                                       f"{3 * m['frobenius_se']:.4f}, ||Q_T - Sigma|| {m['QT_gap_rel']:.1e}")


def test_criterion_09_mixing(runs):
    m = metrics(runs, "mixing")
    below = {f: m["final_delta"][f] < m["final_floor"][f] for f in m["final_delta"]}
    ok = len(below) == 3 and all(below.values()) and m["envelope_ok"] and m["separation_M"] == pytest.approx(1.0)
    record(9, "strong mixing", ok, ", ".join(f"{f} {m['final_delta'][f]:.4f}<{m['final_floor'][f]:.4f}"
                                             for f in sorted(below)) + ", envelope bounded")


def test_criterion_10_strong_feller(runs):
    m = metrics(runs, "strong_feller")
    T_sat = metrics(runs, "null_control")["saturation_T"]
    ok = m["min_slack"] >= 0 and m["pairs"] == 10 and m["t"] > T_sat and np.isfinite(m["R_norm"])
    record(10, "strong Feller", ok, f"t = {m['t']}, ||R(t)|| = {m['R_norm']:.3f}, min slack {m['min_slack']:.3f}")


def test_criterion_11_cameron_martin(runs):
    m = metrics(runs, "cameron_martin")
    (nm, ns), (wm, ws), (dm, ds) = m["normalization"], m["weighted"], m["direct"]
    z_norm = (nm - 1.0) / ns
    z_id = (wm - dm) / np.hypot(ws, ds)
    ok = abs(z_norm) <= 3 and abs(z_id) <= 3
    record(11, "Cameron-Martin", ok, f"normalization z = {z_norm:+.2f}, identity z = {z_id:+.2f}, n = 1e4")


def test_criterion_12_determinism(runs, tmp_path):
    first = runs["reference_1d"]
    code_a, man, raw_a = run_verify_all("reference_1d", tmp_path / "again")
    code_b, _, raw_b = run_verify_all("reference_1d", tmp_path / "workers", "--workers", "3")
    statuses = [v["status"] for v in man["verdicts"]]
    ok = raw_a == first["raw"] and raw_b == first["raw"] and code_a == first["code"] == 0
    ok &= statuses.count("PASS") == 12
    record(12, "determinism", ok, f"3 manifests byte-identical (workers 1, 1, 3), "
                                  f"{statuses.count('PASS')}/12 PASS, exit {code_a}")
