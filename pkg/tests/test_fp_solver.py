import numpy as np
import pytest

from mfg_evoclust.datasets import DensityField
from mfg_evoclust.fp_solver import (CFLViolationError, FPError,
                                    assemble_operator, evolve, step)
from mfg_evoclust.gaussian_oracle import (GaussianMoments, eval_density,
                                          grid_moments, integrate)
from mfg_evoclust.grid import build_spatial_grid


def _gaussian_field(grid, nu, T):
    vals = eval_density(GaussianMoments(nu, T), grid.barycenters)
    return DensityField(grid, vals, 0.0).normalized()


def test_zero_drift_small_eps_is_near_identity():
    g = build_spatial_grid([(0, 1)], 50)
    A = assemble_operator(np.array([[1e-12]]), np.array([0.5]), eps=1e-12,
                          dt=1e-3, grid=g, cfl_max=None)
    v = np.zeros(50)
    v[25] = 1.0
    out = A.apply(v)
    assert out[25] == pytest.approx(1.0, abs=1e-6)


def test_column_sums_are_one():
    g = build_spatial_grid([(0, 1)], 80)
    A = assemble_operator(np.array([[2.0]]), np.array([0.5]), eps=0.05,
                          dt=1e-3, grid=g, cfl_max=None)
    cols = np.asarray(A.matrix.sum(axis=0)).ravel()
    assert np.abs(cols - 1.0).max() < 1e-12
    assert A.matrix.min() >= 0


def test_column_sums_one_2d():
    g = build_spatial_grid([(0, 1), (0, 1)], 20)
    V = np.array([[3.0, 0.5], [0.5, 2.0]])
    A = assemble_operator(V, np.array([0.4, 0.6]), eps=0.02, dt=5e-4,
                          grid=g, cfl_max=None)
    cols = np.asarray(A.matrix.sum(axis=0)).ravel()
    assert np.abs(cols - 1.0).max() < 1e-12
    assert A.matrix.min() >= 0


def test_diffusion_variance_growth_per_step():
    # point mass gains exactly 2 eps dt variance per coordinate per step
    g = build_spatial_grid([(0, 1)], 200)
    eps, dt = 0.05, 1e-3
    A = assemble_operator(np.array([[1e-12]]), np.array([0.5]), eps, dt, g,
                          cfl_max=None)
    v = np.zeros(200)
    v[100] = 1.0 / g.cell_measure
    out = DensityField(g, A.apply(v), dt)
    _, _, cov = grid_moments(out)
    assert cov[0, 0] == pytest.approx(2 * eps * dt, rel=1e-9)


def test_step_preserves_mass_and_positivity():
    g = build_spatial_grid([(0, 1)], 100)
    m = _gaussian_field(g, [0.5], [[0.01]])
    A = assemble_operator(np.array([[1.0]]), np.array([0.4]), eps=0.02,
                          dt=1e-3, grid=g, cfl_max=None)
    out = step(m, A)
    assert (out.values >= 0).all()
    assert out.mass() == pytest.approx(m.mass(), abs=1e-12)


def test_cfl_check_fires():
    g = build_spatial_grid([(0, 1)], 50)
    with pytest.raises(CFLViolationError):
        assemble_operator(np.array([[500.0]]), np.array([0.5]), eps=0.05,
                          dt=1e-2, grid=g, cfl_max=1.0)


def test_diffusion_extent_guard():
    g = build_spatial_grid([(0, 1)], 50)
    with pytest.raises(FPError):
        assemble_operator(np.array([[1.0]]), np.array([0.5]), eps=10.0,
                          dt=0.1, grid=g, cfl_max=None)


def test_evolve_zero_steps_returns_initial():
    g = build_spatial_grid([(0, 1)], 40)
    m = _gaussian_field(g, [0.5], [[0.01]])
    out = evolve(m, [], eps=0.1, dt=1e-3)
    assert out.shape == (1, 40)
    assert np.array_equal(out[0], m.values)


def test_pure_diffusion_heat_kernel():
    # variance 0.01^2 + 2 eps t within 3 percent after 100 steps
    g = build_spatial_grid([(0, 1)], 200)
    eps, dt = 1e-3, 1e-3
    m0 = _gaussian_field(g, [0.5], [[1e-4]])
    V = np.array([[1e-9]])
    out = evolve(m0, [(V, np.array([0.5]))] * 100, eps, dt, cfl_max=None)
    _, _, cov = grid_moments(DensityField(g, out[-1], 0.1))
    expected = 1e-4 + 2 * eps * 0.1
    assert abs(cov[0, 0] - expected) / expected < 0.03


def test_attractive_drift_exponential_mean_convergence():
    g = build_spatial_grid([(-1, 2)], 600)
    eps, dt = 0.1, 5e-4
    V = np.array([[2.0]])
    M = np.array([0.5])
    m0 = _gaussian_field(g, [0.9], [[0.01]])
    n = 1000
    out = evolve(m0, [(V, M)] * n, eps, dt, cfl_max=None)
    for frac in [0.25, 0.5, 1.0]:
        k = int(n * frac)
        _, mean, _ = grid_moments(DensityField(g, out[k], k * dt))
        expected = 0.5 + 0.4 * np.exp(-2.0 * k * dt)
        assert mean[0] == pytest.approx(expected, abs=2e-4)


def test_moments_track_oracle_constant_coefficients():
    g = build_spatial_grid([(-1, 2)], 600)
    eps, dt, n = 0.1, 5e-4, 800
    V = np.array([[2.0]])
    M = np.array([0.5])
    s0 = GaussianMoments([0.6], [[0.02]])
    m0 = DensityField(g, eval_density(s0, g.barycenters), 0.0).normalized()
    out = evolve(m0, [(V, M)] * n, eps, dt, cfl_max=None)
    oracle = integrate(s0, [V] * n, [M] * n, eps, dt)
    _, mean, cov = grid_moments(DensityField(g, out[-1], n * dt))
    assert abs(mean[0] - oracle[-1].nu[0]) / abs(oracle[-1].nu[0]) < 0.02
    assert abs(cov[0, 0] - oracle[-1].T[0, 0]) / oracle[-1].T[0, 0] < 0.02


def test_mass_conserved_over_long_horizon():
    g = build_spatial_grid([(0, 1)], 100)
    m0 = _gaussian_field(g, [0.4], [[0.005]])
    V = np.array([[3.0]])
    out = evolve(m0, [(V, np.array([0.5]))] * 2000, eps=0.5, dt=1e-3, cfl_max=None)
    masses = g.cell_measure * out.sum(axis=1)
    assert np.abs(masses - masses[0]).max() < 1e-12


def test_stiff_contraction_keeps_smooth_profile():
    # V dt >> 1: substepping must not leave zero-density holes in the core
    g = build_spatial_grid([(0, 1)], 100)
    eps, dt = 1.0, 1e-3
    V = np.array([[1.0 / 2e-4]])
    M = np.array([0.4])
    m0 = _gaussian_field(g, [0.42], [[3e-4]])
    out = evolve(m0, [(V, M)] * 30, eps, dt, cfl_max=None)
    x = g.barycenters[:, 0]
    core = np.abs(x - 0.4) <= 2.5 * np.sqrt(2e-4)
    assert out[-1][core].min() > 1e-3
    _, mean, cov = grid_moments(DensityField(g, out[-1], 0.03))
    assert mean[0] == pytest.approx(0.4, abs=1e-3)
    assert cov[0, 0] == pytest.approx(eps / V[0, 0], rel=0.15)


def test_2d_moments_track_oracle_rotated_covariance():
    g = build_spatial_grid([(0, 1), (0, 1)], 60)
    eps, dt, n = 0.05, 1e-3, 300
    th = 0.5
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    V = R @ np.diag([8.0, 3.0]) @ R.T
    M = np.array([0.5, 0.5])
    s0 = GaussianMoments([0.6, 0.45], np.diag([4e-3, 2.5e-3]))
    m0 = DensityField(g, eval_density(s0, g.barycenters), 0.0).normalized()
    out = evolve(m0, [(V, M)] * n, eps, dt, cfl_max=None)
    oracle = integrate(s0, [V] * n, [M] * n, eps, dt)
    _, mean, cov = grid_moments(DensityField(g, out[-1], n * dt))
    assert np.abs(mean - oracle[-1].nu).max() < 5e-3
    assert np.linalg.norm(cov - oracle[-1].T) / np.linalg.norm(oracle[-1].T) < 0.10
    # cross term carries the right sign and rough size
    assert np.sign(cov[0, 1]) == np.sign(oracle[-1].T[0, 1])


def test_first_order_error_halves_with_h_and_dt():
    eps = 0.1
    V = np.array([[2.0]])
    M = np.array([0.5])
    s0 = GaussianMoments([0.6], [[0.02]])

    def run(h, dt, T=0.5):
        g = build_spatial_grid([(-1, 2)], int(round(3.0 / h)))
        m0 = DensityField(g, eval_density(s0, g.barycenters), 0.0).normalized()
        n = int(round(T / dt))
        out = evolve(m0, [(V, M)] * n, eps, dt, cfl_max=None)
        oracle = integrate(s0, [V] * n, [M] * n, eps, dt)
        _, mean, cov = grid_moments(DensityField(g, out[-1], T))
        return max(abs(mean[0] - oracle[-1].nu[0]) / abs(oracle[-1].nu[0]),
                   abs(cov[0, 0] - oracle[-1].T[0, 0]) / oracle[-1].T[0, 0])

    e1 = run(5e-3, 5e-4)
    e2 = run(2.5e-3, 2.5e-4)
    assert 0.4 <= e2 / e1 <= 0.6
