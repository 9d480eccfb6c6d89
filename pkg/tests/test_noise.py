import numpy as np
import pytest
import scipy.integrate
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_ops
from stochwave.assembly import PhysParams
from stochwave.noise import (NoiseModel, exact_increment_covariance, gaussian_convolution,
                             sample_brownian_increments, white_transition)


def riemann_covariance(A, BBt, t, n=10_000):
    """Midpoint rule for int_0^t e^{As} BB^T e^{A^T s} ds with n subintervals."""
    h = t / n
    step = scipy.linalg.expm(A * h)
    E = scipy.linalg.expm(A * h / 2)
    S = np.zeros_like(BBt)
    for _ in range(n):
        S += E @ BBt @ E.T
        E = E @ step
    return S * h


def test_increment_covariance_vs_riemann():
    ops = make_ops(5, PhysParams())
    dt = 0.1
    inc = exact_increment_covariance(ops, dt)
    ref = riemann_covariance(ops.A, ops.B @ ops.B.T, dt)
    assert np.linalg.norm(inc.cov - ref) <= 1e-8 * np.linalg.norm(ref)
    assert np.allclose(inc.mean_map, scipy.linalg.expm(ops.A * dt), rtol=1e-12, atol=1e-13)


def test_increment_covariance_stiff_reference(ops5):
    # m = 0.1 makes the plain midpoint rule too coarse at 1e4 points; extrapolate
    dt = 0.1
    A, BBt = ops5.A, ops5.B @ ops5.B.T
    inc = exact_increment_covariance(ops5, dt)
    rich = (4 * riemann_covariance(A, BBt, dt, 20_000) - riemann_covariance(A, BBt, dt, 10_000)) / 3
    assert np.linalg.norm(inc.cov - rich) <= 1e-10 * np.linalg.norm(rich)
    f = lambda s: scipy.linalg.expm(A * s) @ BBt @ scipy.linalg.expm(A * s).T
    q, _ = scipy.integrate.quad_vec(f, 0.0, dt, epsabs=1e-15, epsrel=1e-13)
    assert np.linalg.norm(inc.cov - q) <= 1e-12 * np.linalg.norm(q)


def test_long_horizon_stays_psd(ops9):
    # a single augmented exponential loses positivity here; doubling must not
    _, S = white_transition(ops9, 50.0)
    lam = np.linalg.eigvalsh(S)
    assert lam[0] > 0
    assert np.allclose(S, S.T)


def test_zero_drift_gives_linear_growth():
    BBt = np.diag([1.0, 2.0, 3.0])
    P, S = gaussian_convolution(np.zeros((3, 3)), BBt, 0.7)
    assert np.allclose(P, np.eye(3), rtol=0, atol=1e-15)
    assert np.allclose(S, 0.7 * BBt, rtol=1e-14)


def test_chapman_kolmogorov(ops9):
    P1, S1 = white_transition(ops9, 0.3)
    _, S2 = white_transition(ops9, 0.6)
    assert np.allclose(P1 @ S1 @ P1.T + S1, S2, rtol=1e-10, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(dt=st.floats(1e-4, 20.0))
def test_covariance_symmetric_psd(ops5, dt):
    inc = exact_increment_covariance(ops5, dt)
    assert np.array_equal(inc.cov, inc.cov.T)
    lam = np.linalg.eigvalsh(inc.cov_white)
    assert lam[0] >= -1e-12 * lam[-1]


def test_small_dt_limit(ops9):
    dt = 1e-6
    inc = exact_increment_covariance(ops9, dt)
    BBt = ops9.B @ ops9.B.T
    assert np.linalg.norm(inc.cov - dt * BBt) <= 1e-4 * np.linalg.norm(dt * BBt)


def test_invalid_dt(ops5):
    with pytest.raises(ValueError):
        exact_increment_covariance(ops5, 0.0)


def test_stream_replay_and_independence():
    a = NoiseModel.for_trajectory(3, 42, 0, 5)
    b = NoiseModel.for_trajectory(3, 42, 0, 5)
    assert np.array_equal(a.generator().standard_normal(4), b.generator().standard_normal(4))
    assert a.counter == 1
    # the next call is a fresh, different stream
    assert not np.array_equal(a.generator().standard_normal(4), NoiseModel(3, 42, (0, 5)).generator().standard_normal(4))
    other = NoiseModel.for_trajectory(3, 42, 0, 6).generator().standard_normal(4)
    assert not np.array_equal(other, NoiseModel.for_trajectory(3, 42, 0, 5).generator().standard_normal(4))
    assert a.metadata() == {"seed": 42, "stream": [0, 5], "counter": 2}


def test_brownian_increment_variance():
    z = sample_brownian_increments(NoiseModel(4, seed=1), 0.01, 50_000)
    assert z.shape == (50_000, 4)
    se = 0.01 * np.sqrt(2 / 50_000)
    assert np.all(np.abs(z.var(axis=0) - 0.01) < 4 * se)
    assert np.abs(np.corrcoef(z.T)[0, 1]) < 4 / np.sqrt(50_000)
