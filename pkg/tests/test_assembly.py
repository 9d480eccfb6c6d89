import numpy as np
import pytest
import scipy.io
from hypothesis import given, settings
from hypothesis import strategies as st

from stochwave.assembly import (PhysParams, adjoint_defect, assemble, dissipativity_audit, energy,
                                skew_defect, write_matrix_market)
from stochwave.domain import DomainConfig, build_grid

from conftest import REF, make_ops


def ghost_node_rhs(x, nx, p):
    """Time derivative from central differences with a ghost node at x = L (1D, L = 1)."""
    h = 1.0 / (nx - 1)
    n = nx - 1
    phi, phi_t = x[:n], x[n:2 * n]
    delta, delta_t = x[2 * n], x[2 * n + 1]
    full = np.concatenate([[0.0], phi])
    acc = np.empty(n)
    for j in range(1, nx):
        right = full[j + 1] if j < nx - 1 else full[j - 1] + 2 * h * delta_t
        acc[j - 1] = p.c**2 * (right - 2 * full[j] + full[j - 1]) / h**2
    dtt = (-p.rho * phi_t[-1] - p.d * delta_t - p.k * delta) / p.m
    return np.concatenate([phi_t, acc, [delta_t], [dtt]])


def test_generator_matches_ghost_node_stencil(rng):
    p = PhysParams(rho=1.3, c=0.7, m=0.4, d=2.0, k=1.5)
    ops = assemble(build_grid(DomainConfig(1, 1.0, 11)), p)
    for _ in range(5):
        x = rng.standard_normal(ops.n)
        assert np.allclose(ops.A @ x, ghost_node_rhs(x, 11, p), rtol=1e-12, atol=1e-10)


def test_dissipation_form_explicit(ops9):
    MA = ops9.M @ ops9.A
    sym = 0.5 * (MA + MA.T)
    expected = np.zeros_like(sym)
    s = ops9.layout.delta_t
    expected[s, s] = -ops9.params.d * np.diag(ops9.boundary_weights)
    assert np.array_equal(sym, expected)


@pytest.mark.parametrize("dim", [1, 2])
def test_audits_vanish(dim):
    ops = make_ops(9, dimension=dim)
    assert dissipativity_audit(ops) <= 1e-12
    assert adjoint_defect(ops) <= 1e-12
    undamped = make_ops(9, PhysParams(1.0, 1.0, 0.1, 0.0, 1.0), dimension=dim)
    assert skew_defect(undamped) <= 1e-12
    assert skew_defect(ops) > 1e-3


@settings(max_examples=30, deadline=None)
@given(rho=st.floats(0.1, 10), c=st.floats(0.1, 10), m=st.floats(0.01, 10), d=st.floats(0, 10),
       k=st.floats(0.01, 10), nx=st.integers(3, 20), dim=st.sampled_from([1, 2]))
def test_audits_random_parameters(rho, c, m, d, k, nx, dim):
    ops = make_ops(nx, PhysParams(rho, c, m, d, k), dimension=dim, ny=3)
    assert dissipativity_audit(ops) <= 1e-12
    assert adjoint_defect(ops) <= 1e-12


def test_noise_gram_on_2d_strip(ops2d):
    # 4 gamma1 nodes, K = 4 quadrature-orthonormal channels
    B, M = ops2d.B, ops2d.M
    assert ops2d.K == 4
    assert np.allclose(B.T @ M @ B, np.eye(4) / ops2d.params.m, rtol=1e-14, atol=0)


def test_channel_count_bounds():
    g = build_grid(DomainConfig(2, 1.0, 5, ny=4))
    assert assemble(g, REF, 2).K == 2
    with pytest.raises(ValueError):
        assemble(g, REF, 5)
    with pytest.raises(ValueError):
        assemble(g, REF, 0)


def test_parameter_validation():
    with pytest.raises(ValueError, match="m must be"):
        PhysParams(m=0.0)
    with pytest.raises(ValueError):
        PhysParams(d=-1.0)


def test_boundary_only_energy():
    ops = assemble(build_grid(DomainConfig(1, 1.0, 9)), PhysParams(k=2.5))
    e = energy(ops.layout.pack(delta=1.0), ops)
    assert e.boundary == pytest.approx(1.25) and e.acoustic == 0.0


def test_acoustic_energy_matches_piecewise_linear_integral(ops9, rng):
    x = rng.standard_normal(ops9.n)
    phi, phi_t, _, _ = ops9.layout.split(x)
    h = ops9.grid.h
    full = np.concatenate([[0.0], phi])
    grad = np.sum(np.diff(full) ** 2) / h
    w = np.full(len(phi), h)
    w[-1] = h / 2
    expected = 0.5 * (grad + np.sum(w * phi_t**2))
    assert energy(x, ops9).acoustic == pytest.approx(expected, rel=1e-13)


def test_energy_is_half_m_norm(ops2d, rng):
    x = rng.standard_normal(ops2d.n)
    assert energy(x, ops2d).total == pytest.approx(0.5 * x @ ops2d.M @ x, rel=1e-13)
    assert energy(x, ops2d).total == pytest.approx(0.5 * ops2d.norm_M(x) ** 2, rel=1e-12)


def test_energy_invariant_under_periodic_shift(ops2d, rng):
    """Translating a field along the periodic direction permutes nodes; energy is unchanged."""
    ny, nx = ops2d.grid.shape
    x = rng.standard_normal(ops2d.n)
    lay = ops2d.layout
    phi, phi_t, delta, delta_t = lay.split(x)
    shift = lambda v, cols: np.roll(v.reshape(ny, cols), 1, axis=0).ravel()
    y = lay.pack(shift(phi, nx - 1), shift(phi_t, nx - 1), np.roll(delta, 1), np.roll(delta_t, 1))
    assert energy(y, ops2d).total == pytest.approx(energy(x, ops2d).total, rel=1e-13)


def test_whitening_round_trip(ops2d, rng):
    X = rng.standard_normal((3, ops2d.n))
    assert np.allclose(ops2d.unwhiten(ops2d.whiten(X)), X, atol=1e-12)
    assert np.allclose(ops2d.chol @ ops2d.chol.T, ops2d.M, rtol=1e-13, atol=1e-13)


def test_matrix_market_export(ops9, tmp_path):
    paths = write_matrix_market(ops9, tmp_path)
    A = scipy.io.mmread(str(paths[0])).toarray()
    assert np.array_equal(A, ops9.A)
