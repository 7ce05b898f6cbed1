import numpy as np
import pytest

from mfg_evoclust.datasets import DensityField
from mfg_evoclust.gaussian_oracle import (GaussianMoments, OracleError,
                                          eval_density, grid_moments,
                                          integrate, integrate_scripted,
                                          logc_drift_residual, ode_step)
from mfg_evoclust.grid import build_spatial_grid


def test_state_requires_spd_covariance():
    with pytest.raises(OracleError):
        GaussianMoments([0.0], [[-1.0]])


def test_normalization_derived_from_T():
    s = GaussianMoments([0.0], [[1.0]])
    assert s.c == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-12)
    s2 = GaussianMoments([0.0, 0.0], np.diag([2.0, 0.5]))
    assert s2.c == pytest.approx(1 / (2 * np.pi), abs=1e-12)


def test_fixed_point_of_moment_odes():
    eps = 0.7
    V = np.array([[2.0, 0.4], [0.4, 1.0]])
    M = np.array([0.2, -0.1])
    T = eps * np.linalg.inv(V)
    s = GaussianMoments(M, T)
    out = ode_step(s, V, M, eps, 0.05)
    assert np.allclose(out.nu, M, atol=1e-12)
    assert np.allclose(out.T, T, atol=1e-12)


def test_scalar_mean_decay_closed_form():
    s = GaussianMoments([1.0], [[1.0]])
    states = integrate(s, [np.eye(1)] * 100, [np.zeros(1)] * 100, eps=1.0, dt=1e-2)
    assert states[-1].nu[0] == pytest.approx(np.exp(-1.0), abs=1e-8)


def test_scalar_covariance_closed_form():
    # V=1, eps=1, T0=2: T(t) = 1 + e^{-2t}
    s = GaussianMoments([0.0], [[2.0]])
    states = integrate(s, [np.eye(1)] * 100, [np.zeros(1)] * 100, eps=1.0, dt=1e-2)
    assert states[-1].T[0, 0] == pytest.approx(1 + np.exp(-2.0), abs=1e-8)


def test_rk4_fourth_order_convergence():
    V = np.eye(1)
    M = np.zeros(1)
    exact = np.exp(-1.0)
    errs = []
    for n in [10, 20, 40]:
        s = GaussianMoments([1.0], [[1.0]])
        states = integrate(s, [V] * n, [M] * n, eps=1.0, dt=1.0 / n)
        errs.append(abs(states[-1].nu[0] - exact))
    rates = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(12 < r < 20 for r in rates)         # ~2^4


def test_stiff_step_substepping_stays_stable():
    # |V| dt = 5 would blow up naive RK4
    s = GaussianMoments([0.3], [[5e-3]])
    V = np.array([[5000.0]])
    M = np.array([0.15])
    out = ode_step(s, V, M, eps=1.0, dt=1e-3)
    assert abs(out.nu[0] - 0.15) < 1e-2
    assert 0 < out.T[0, 0] < 1e-3


def test_eval_density_peak_and_symmetry():
    s = GaussianMoments([0.4], [[1.0]])
    assert eval_density(s, np.array([[0.4]]))[0] == pytest.approx(1 / np.sqrt(2 * np.pi))
    d = 0.3
    left = eval_density(s, np.array([[0.4 - d]]))[0]
    right = eval_density(s, np.array([[0.4 + d]]))[0]
    assert left == pytest.approx(right, abs=1e-15)


def test_gridded_gaussian_mass_near_one():
    s = GaussianMoments([0.5], [[0.01]])
    g = build_spatial_grid([(0, 1)], 500)
    vals = eval_density(s, g.barycenters)
    assert g.quadrature(vals) == pytest.approx(1.0, abs=1e-6)


def test_grid_moments_recover_gaussian():
    s = GaussianMoments([0.4, 0.6], np.array([[0.01, 0.003], [0.003, 0.02]]))
    g = build_spatial_grid([(-0.5, 1.5), (-0.5, 1.5)], 160)
    f = DensityField(g, eval_density(s, g.barycenters), 0.0)
    mass, mean, cov = grid_moments(f)
    assert mass == pytest.approx(1.0, abs=1e-8)
    assert np.allclose(mean, s.nu, atol=1e-8)
    assert np.allclose(cov, s.T, atol=1e-6)


def test_grid_moments_point_masses():
    g = build_spatial_grid([(0, 1)], 10)
    vals = np.zeros(10)
    vals[3] = 1.0
    _, mean, cov = grid_moments(DensityField(g, vals, 0.0))
    assert mean[0] == pytest.approx(g.barycenters[3, 0])
    assert cov[0, 0] == pytest.approx(0.0, abs=1e-15)

    vals = np.zeros(10)
    vals[2] = vals[7] = 1.0
    _, mean, _ = grid_moments(DensityField(g, vals, 0.0))
    assert mean[0] == pytest.approx((g.barycenters[2, 0] + g.barycenters[7, 0]) / 2)


def test_logc_ode_consistency():
    # d/dt log c = tr(V) - eps tr(T^{-1}) along the trajectory
    eps = 0.5
    V = np.array([[1.5, 0.2], [0.2, 0.9]])
    M = np.array([0.1, 0.2])
    s = GaussianMoments([0.4, 0.1], np.diag([0.3, 0.15]))
    n, dt = 1000, 5e-4
    states = integrate(s, [V] * n, [M] * n, eps, dt)
    assert logc_drift_residual(states, [V] * n, eps, dt) < 1e-6


def test_scripted_integration_tracks_time_varying_coefficients():
    # nu' = -V(t)(nu - M(t)) with V constant, M(t) = t has closed form
    V = np.array([[1.0]])
    M_of_t = lambda t: np.array([t])
    s = GaussianMoments([0.0], [[1.0]])
    states = integrate_scripted(s, lambda t: V, M_of_t, eps=1.0, dt=1e-2, n_steps=100)
    exact = 1.0 - 1.0 + np.exp(-1.0)        # nu(t) = t - 1 + e^{-t}
    assert states[-1].nu[0] == pytest.approx(exact, abs=1e-9)
