"""Quantitative evaluation: transport distance, centroid error, smoothness.

The 1D Wasserstein-1 distance uses the cumulative-distribution identity
W1 = h * sum_i |F_i - G_i|, an exact closed form of the transport linear
program on a common grid; the LP itself is kept as an independent oracle for
testing and for 2D spot checks on small node sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix

from .datasets import DataDensity, DensityField, exact_centroids
from .driver import Trajectory
from .estep import responsibilities
from .kernels import TemporalKernel, smooth_array

LP_MAX_NODES = 200


class MetricsError(ValueError):
    pass


@dataclass
class TransportPlan:
    """Optimal transport plan between two gridded densities."""

    plan: np.ndarray     # (M, M), pi_ij >= 0
    cost: float
    source_masses: np.ndarray
    target_masses: np.ndarray


def w1_1d(f: DensityField, m: DensityField) -> float:
    """Discrete 1-Wasserstein distance between two 1D fields on one grid."""
    if f.grid.dim != 1:
        raise MetricsError("w1_1d needs a 1D grid")
    if not f.grid.same_layout(m.grid):
        raise MetricsError("fields live on different grids")
    h = f.grid.cell_measure
    F = np.cumsum(f.normalized().values) * h
    G = np.cumsum(m.normalized().values) * h
    return float(h * np.abs(F - G).sum())


def w1_lp_oracle(f: DensityField, m: DensityField) -> tuple[float, TransportPlan]:
    """Exact LP optimum of the transport program (testing / 2D spot checks).

    min sum_ij pi_ij |x_i - x_j|  s.t.  sum_j pi_ij = f_i h,  sum_i pi_ij = m_j h.
    """
    if not f.grid.same_layout(m.grid):
        raise MetricsError("fields live on different grids")
    M = f.grid.num_nodes
    if M > LP_MAX_NODES:
        raise MetricsError(f"LP oracle is limited to {LP_MAX_NODES} nodes, got {M}")
    h = f.grid.cell_measure
    a = f.normalized().values * h
    b = m.normalized().values * h
    x = f.grid.barycenters
    cost = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)

    # marginal constraints, one row per source and per target
    ij = np.arange(M * M)
    rows_src = ij // M
    rows_tgt = M + ij % M
    A = coo_matrix(
        (np.ones(2 * M * M), (np.concatenate([rows_src, rows_tgt]), np.concatenate([ij, ij]))),
        shape=(2 * M, M * M),
    )
    rhs = np.concatenate([a, b])
    res = linprog(cost.ravel(), A_eq=A.tocsr(), b_eq=rhs, method="highs")
    if not res.success:
        raise MetricsError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(M, M)
    return float(res.fun), TransportPlan(plan, float(res.fun), a, b)


def centroid_error(est: np.ndarray, truth: np.ndarray) -> float:
    """Label-invariant centroid error: min over matchings of sum_k ||e_k - t_k||_1."""
    est = np.atleast_2d(np.asarray(est, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if est.shape != truth.shape:
        raise MetricsError(f"shape mismatch {est.shape} vs {truth.shape}")
    cost = np.abs(est[:, None, :] - truth[None, :, :]).sum(-1)
    row, col = linear_sum_assignment(cost)
    return float(cost[row, col].sum())


def centroid_error_bruteforce(est: np.ndarray, truth: np.ndarray) -> float:
    """Permutation-enumeration route, the independent check of centroid_error."""
    est = np.atleast_2d(np.asarray(est, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    K = est.shape[0]
    return min(
        float(np.abs(est[list(p)] - truth).sum()) for p in permutations(range(K))
    )


def smoothness_stats(series: np.ndarray) -> float:
    """Discrete total variation in time, sum_n ||s_{n+1} - s_n||_1; lower is smoother."""
    series = np.asarray(series, dtype=float)
    if series.shape[0] < 2:
        raise MetricsError("need at least two time nodes")
    return float(np.abs(np.diff(series, axis=0)).reshape(series.shape[0] - 1, -1).sum())


def xcorr_lag(delayed: np.ndarray, reference: np.ndarray, dt: float,
              max_lag: float) -> float:
    """Cross-correlation lag (in time units) of ``delayed`` behind ``reference``.

    Series are (N+1,) or (N+1, q); multi-column series contribute jointly.
    Positive result means ``delayed`` trails the reference.
    """
    a = np.atleast_2d(np.asarray(delayed, dtype=float).T).T
    b = np.atleast_2d(np.asarray(reference, dtype=float).T).T
    if a.shape != b.shape:
        raise MetricsError("series shapes differ")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    L = int(round(max_lag / dt))
    n = a.shape[0]
    if L >= n - 1:
        raise MetricsError("max_lag exceeds the series length")
    scores = np.empty(2 * L + 1)
    for i, ell in enumerate(range(-L, L + 1)):
        if ell >= 0:
            num = float((a[ell:] * b[: n - ell]).sum())
            den = np.sqrt(float((a[ell:] ** 2).sum()) * float((b[: n - ell] ** 2).sum()))
        else:
            num = float((a[: n + ell] * b[-ell:]).sum())
            den = np.sqrt(float((a[: n + ell] ** 2).sum()) * float((b[-ell:] ** 2).sum()))
        scores[i] = num / den if den > 0 else 0.0
    return float((int(np.argmax(scores)) - L) * dt)


def hard_clusters(gamma: np.ndarray) -> np.ndarray:
    """Argmax-responsibility labels with deterministic lowest-index tie-breaking."""
    return np.asarray(gamma).argmax(axis=0)


@dataclass
class MetricSeries:
    """Per-time-node evaluation of a trajectory against its dataset."""

    times: np.ndarray
    centroid_err: np.ndarray
    w1: np.ndarray                  # exact CDF value in 1D, NaN where undefined
    alpha_tv_increment: np.ndarray  # ||alpha_n - alpha_{n-1}||_1, 0 at n=0
    centroid_tv_increment: np.ndarray
    mass_drift: np.ndarray          # max_k |mass_k(n) - mass_k(0)|

    @property
    def alpha_tv(self) -> float:
        return float(self.alpha_tv_increment.sum())

    @property
    def centroid_tv(self) -> float:
        return float(self.centroid_tv_increment.sum())


def evaluate_trajectory(traj: Trajectory, density: DataDensity) -> MetricSeries:
    """Centroid error, W1, smoothness increments and mass drift per node."""
    from .datasets import sample_to_grid

    N = traj.n_steps
    grid = traj.grid
    times = np.array([traj.time_grid.time(n) for n in range(N + 1)])
    cents = np.stack([traj.component_means(n) for n in range(N + 1)])

    cent_err = np.empty(N + 1)
    w1 = np.full(N + 1, np.nan)
    masses = traj.diagnostics["masses"]
    analytic = density.kind in ("test1", "test2")
    for n in range(N + 1):
        mix = DensityField(grid, traj.mixture_values(n), times[n])
        f_n = sample_to_grid(density, grid, times[n])
        if analytic:
            cent_err[n] = centroid_error(cents[n], exact_centroids(density, times[n]))
        else:
            cent_err[n] = np.nan
        if grid.dim == 1:
            w1[n] = w1_1d(f_n, mix)

    alpha_inc = np.zeros(N + 1)
    cent_inc = np.zeros(N + 1)
    alpha_inc[1:] = np.abs(np.diff(traj.mixture_weights, axis=0)).sum(axis=1)
    cent_inc[1:] = np.abs(np.diff(cents, axis=0)).reshape(N, -1).sum(axis=1)
    drift = np.abs(masses - masses[0]).max(axis=1)
    return MetricSeries(times, cent_err, w1, alpha_inc, cent_inc, drift)


def smoothed_data_moments(density: DataDensity, traj: Trajectory,
                          kernel: TemporalKernel) -> tuple[np.ndarray, np.ndarray]:
    """Kernel-smoothed data mean and raw second moment series (g * E_f[X] etc.).

    Uses the same discrete weights, past extension and right-boundary rule as
    the statistics smoothing, so the maximizer identities hold discretely.
    """
    from .datasets import sample_to_grid

    N = traj.n_steps
    grid = traj.grid
    d = grid.dim
    mean = np.empty((N + 1, d))
    second = np.empty((N + 1, d, d))
    x = grid.barycenters
    for n in range(N + 1):
        f_n = sample_to_grid(density, grid, traj.time_grid.time(n))
        w = f_n.values * grid.cell_measure
        mean[n] = w @ x
        second[n] = np.einsum("i,ij,ik->jk", w, x, x)
    n_past = kernel.past_extent
    pad = lambda s: np.concatenate([np.repeat(s[:1], n_past, axis=0), s], axis=0)
    return smooth_array(pad(mean), kernel, n_past), smooth_array(pad(second), kernel, n_past)


def prop6_covariance_residual(traj: Trajectory, density: DataDensity,
                              kernel: TemporalKernel, n: int) -> float:
    """Residual of the smoothed-covariance identity at node n.

    Compares the measured mixture covariance against
    g*E_f[XX^T] - (g*E_f[X])(g*E_f[X])^T
    + sum_k alpha~_k mu~_k mu~_k^T - g*(sum_k alpha_k mu_k mu_k^T),
    evaluated term by term with the shared discrete kernel.
    """
    from .gaussian_oracle import grid_moments

    if traj.smoothed is None:
        raise MetricsError("trajectory carries no smoothed statistics")
    sm_mean, sm_second = smoothed_data_moments(density, traj, kernel)

    mix = DensityField(traj.grid, traj.mixture_values(n), traj.time_grid.time(n))
    _, _, cov_m = grid_moments(mix)

    outer_raw = traj.alpha[..., None, None] * (
        traj.mu[..., :, None] * traj.mu[..., None, :]
    )
    n_past = kernel.past_extent
    pad = np.concatenate([np.repeat(outer_raw[:1], n_past, axis=0), outer_raw], axis=0)
    sm_outer = smooth_array(pad.sum(axis=1), kernel, n_past)

    st = traj.smoothed
    tilde_term = np.einsum("k,ki,kj->ij", st.alpha[n], st.mu[n], st.mu[n])
    rhs = (sm_second[n] - np.outer(sm_mean[n], sm_mean[n]) + tilde_term - sm_outer[n])
    return float(np.linalg.norm(cov_m - rhs))
