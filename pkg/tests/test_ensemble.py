import json

import numpy as np
import pytest
import scipy.stats

from stochwave import ensemble
from stochwave.analysis import stationary_covariance
from stochwave.assembly import PhysParams
from stochwave.ensemble import (EnsembleConfig, ObservableSet, cameron_martin_check, energy_balance_audit,
                                feller_lipschitz_check, forgetting_envelope, mixing_verdict, run_ensemble,
                                sample_transition, write_decay_csv, write_report_json)
from stochwave.dynamics import simulate
from stochwave.noise import white_transition
from stochwave.analysis import strong_feller_bound

from conftest import make_ops


def unit(ops, seed):
    y = np.random.default_rng(seed).standard_normal(ops.n)
    return ops.unwhiten(y / np.linalg.norm(y))


def test_noise_off_identical_trajectories(ops9):
    x = unit(ops9, 1)
    st = run_ensemble(ops9, EnsembleConfig(2, 1.0, 0.125, (x,), noise=False))[0]
    assert all(np.all(st.se(q) == 0.0) for q in ensemble.QUANTITIES)
    tr = simulate(ops9, x, 1.0, 0.125)
    assert np.allclose(st.mean("energy2"), 2 * tr.total, rtol=1e-12)


def test_rerun_and_worker_count_are_bitwise(ops9):
    base = dict(n_traj=300, T=2.0, dt=0.25, initials=(np.zeros(ops9.n), unit(ops9, 2)), base_seed=9,
                chunk_size=64)
    a = run_ensemble(ops9, EnsembleConfig(**base))
    b = run_ensemble(ops9, EnsembleConfig(**base))
    c = run_ensemble(ops9, EnsembleConfig(**base, workers=4))
    for x, y, z in zip(a, b, c):
        for q in ensemble.QUANTITIES:
            assert np.array_equal(x.mean(q), y.mean(q)) and np.array_equal(x.mean(q), z.mean(q))
            assert np.array_equal(x.se(q), z.se(q))
        assert np.array_equal(x.second_moment_white, z.second_moment_white)
        assert np.array_equal(x.final_white, z.final_white)
    assert a[0].config_hash == c[0].config_hash


def test_execution_order_does_not_matter(ops9):
    """Chunks evaluated in reverse still reduce in trajectory order."""
    cfg = EnsembleConfig(200, 1.0, 0.25, (np.zeros(ops9.n),), base_seed=4, chunk_size=50)
    ref = run_ensemble(ops9, cfg)[0]
    P, S = white_transition(ops9, 0.25)
    G = ensemble.psd_factor(S)
    obs = ObservableSet.build(ops9)
    chunks = ensemble._chunk_bounds(200, 50)
    results = {tuple(c): ensemble._run_chunk(ops9, P, G, np.zeros(ops9.n), c, 0, 4, 0.25, True, 4, obs)
               for c in reversed(chunks)}
    back = ensemble._reduce([results[tuple(c)] for c in chunks], ops9, cfg, np.zeros(ops9.n), 0, 0.25, 4)
    assert np.array_equal(back.mean("energy2"), ref.mean("energy2"))
    assert np.array_equal(back.second_moment_white, ref.second_moment_white)


def test_trajectory_streams_match_single_runs(ops9):
    """Trajectory i of an ensemble is the same path as a standalone run with stream (a, i)."""
    st = run_ensemble(ops9, EnsembleConfig(3, 1.0, 0.25, (np.zeros(ops9.n),), base_seed=5))[0]
    from stochwave.noise import NoiseModel

    tr = simulate(ops9, np.zeros(ops9.n), 1.0, 0.25, NoiseModel.for_trajectory(ops9.K, 5, 0, 2))
    assert np.allclose(st.final_white[2], ops9.whiten(tr.states[-1]), rtol=1e-12, atol=1e-13)


def test_gaussian_marginal(ops9):
    st = run_ensemble(ops9, EnsembleConfig(10_000, 2.0, 2.0, (np.zeros(ops9.n),), base_seed=21))[0]
    g = np.random.default_rng(0).standard_normal(ops9.n)
    lin = st.final_white @ g
    assert scipy.stats.normaltest(lin).pvalue > 0.01
    _, S = white_transition(ops9, 2.0)
    var = g @ S @ g
    assert abs(lin.var(ddof=1) - var) <= 4 * var * np.sqrt(2 / 10_000)


def test_trace_consistency(ops9):
    T = 4.0
    st = run_ensemble(ops9, EnsembleConfig(1000, T, T, (np.zeros(ops9.n),), base_seed=3))[0]
    _, S = white_transition(ops9, T)
    assert abs(st.mean("energy2")[-1] - np.trace(S)) <= 3 * st.se("energy2")[-1]


def test_balance_noise_free_reduces_to_energy_law():
    ops = make_ops(129)
    x = ops.grid.coords[ops.grid.stored, 0]
    x0 = ops.layout.pack(phi=np.exp(-(((x - 0.4) / 0.1) ** 2)))
    st = run_ensemble(ops, EnsembleConfig(2, 4.0, 4.0 / 2048, (x0,), noise=False))[0]
    audit = energy_balance_audit(st, ops)
    assert audit.residual[0] == 0.0
    # trapezoid error only vanishes once the wave has left through gamma1
    assert abs(audit.residual[-1]) <= 1e-8 * st.mean("energy2")[0]


def test_balance_with_noise(ops9):
    st = run_ensemble(ops9, EnsembleConfig(1000, 4.0, 1 / 128, (np.zeros(ops9.n),), base_seed=9))[0]
    audit = energy_balance_audit(st, ops9)
    assert audit.passed and audit.residual[0] == 0.0
    assert audit.max_mean_energy <= audit.bound


def test_balance_statistic_is_calibrated(ops9):
    """Across seeds the standardized residual has mean 0 and unit spread at every time."""
    Z = []
    for seed in range(200, 220):
        st = run_ensemble(ops9, EnsembleConfig(500, 2.0, 1 / 128, (np.zeros(ops9.n),), base_seed=seed))[0]
        a = energy_balance_audit(st, ops9)
        Z.append(a.residual[1:] / a.se[1:])
    Z = np.array(Z)
    assert np.max(np.abs(Z.mean(axis=0))) * np.sqrt(len(Z)) <= 4.0
    assert 0.75 <= Z.std(axis=0).mean() <= 1.25


def test_mixing_identical_ensembles_pass(ops9):
    x = unit(ops9, 3)
    cfg = EnsembleConfig(500, 100.0, 10.0, (x, x), base_seed=1)
    a, _ = run_ensemble(ops9, cfg)
    rep = mixing_verdict(a, a, stationary_covariance(ops9), ops9)
    assert all(np.all(rep.delta[f] == 0) for f in ensemble.BOUNDED)
    assert rep.t_mix == 0.0


def test_mixing_noise_free_delta_is_deterministic(ops9):
    x1, x2 = unit(ops9, 4), 2 * unit(ops9, 5)
    a, b = run_ensemble(ops9, EnsembleConfig(2, 2.0, 0.5, (x1, x2), noise=False))
    rep = mixing_verdict(a, b, stationary_covariance(ops9), ops9)
    E1 = simulate(ops9, x1, 2.0, 0.5).total
    E2 = simulate(ops9, x2, 2.0, 0.5).total
    assert np.allclose(rep.delta["tanh_energy"], np.abs(np.tanh(E1) - np.tanh(E2)), rtol=1e-12, atol=1e-15)


def test_mixing_undamped_is_inconclusive():
    ops = make_ops(9, PhysParams(1.0, 1.0, 0.1, 0.0, 1.0))
    a, b = run_ensemble(ops, EnsembleConfig(50, 1.0, 0.5, (np.zeros(ops.n), unit(ops, 1))))
    rep = mixing_verdict(a, b, stationary_covariance(ops), ops)
    assert rep.verdict == "INCONCLUSIVE" and "undamped" in rep.reasons[0]


def test_mixing_and_forgetting(ops9, tmp_path):
    T = 20 / abs(stationary_covariance(ops9).spectral_abscissa)
    a, b = run_ensemble(ops9, EnsembleConfig(4000, T, T / 50, (np.zeros(ops9.n), unit(ops9, 6)), base_seed=2))
    rep = mixing_verdict(a, b, stationary_covariance(ops9), ops9)
    assert rep.verdict == "PASS" and rep.t_mix is not None
    gap, bound, ok = forgetting_envelope(a, b, ops9)
    assert ok and gap[0] > 0
    write_decay_csv(rep, tmp_path / "decay.csv")
    write_report_json(rep, tmp_path / "r.json", {"config_hash": a.config_hash})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["verdict"] == "PASS" and doc["config_hash"] == a.config_hash
    assert (tmp_path / "decay.csv").read_text().startswith("t,observable,delta,floor")


def test_sample_transition_law(ops9):
    x = unit(ops9, 7)
    Y = sample_transition(ops9, x, 3.0, 4000, 11)
    P, S = white_transition(ops9, 3.0)
    mean = P @ ops9.whiten(x)
    se = np.sqrt(np.diag(S) / 4000)
    assert np.all(np.abs(Y.mean(axis=0) - mean) <= 4.5 * se)


def test_feller_check(ops9):
    t = 8.0
    R = strong_feller_bound(ops9, t).norm
    pairs = [(unit(ops9, 10 + i), unit(ops9, 20 + i)) for i in range(3)]
    chk = feller_lipschitz_check(ops9, t, pairs, 2000, 1, ObservableSet.build(ops9), R)
    assert chk.passed and chk.lhs.shape == (3, 3)


def test_cameron_martin_identity(ops9):
    chk = cameron_martin_check(ops9, 8.0, unit(ops9, 30), 10_000, 77)
    assert chk.normalization_ok and chk.identity_ok


def test_failed_ensemble_raises(ops9):
    x = np.full(ops9.n, np.nan)
    with pytest.raises(ensemble.SimulationError):
        run_ensemble(ops9, EnsembleConfig(4, 1.0, 0.5, (x,)))


def test_partial_failure_is_reported(ops9, monkeypatch):
    real = ensemble._run_chunk

    def flaky(*args, exclude=()):
        res = real(*args, exclude=exclude)
        idx = args[4]
        if not exclude and 3 in idx:
            return [3]
        return res

    monkeypatch.setattr(ensemble, "_run_chunk", flaky)
    st = run_ensemble(ops9, EnsembleConfig(10, 1.0, 0.5, (np.zeros(ops9.n),), chunk_size=5))[0]
    assert st.failed == [3] and st.n_completed == 9 and st.usable
