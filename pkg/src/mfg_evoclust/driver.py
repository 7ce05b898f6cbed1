"""Orchestration: initialization, the sequential EM-PDE loop, and the
whole-horizon fixed point for the symmetric (non-causal) smoothing model.

Four model variants share the same E-step quadratures:

* ``static``         -- independent soft clustering at every frame (baseline);
* ``instantaneous``  -- drift built from raw statistics each step;
* ``asym_averaged``  -- drift built from causally smoothed statistics;
* ``sym_averaged``   -- symmetric smoothing, resolved by Picard iteration
                        over the whole horizon with automatic damping.

The sequential loop follows the printed scheme exactly: at step n the
responsibilities come from (alpha^{n-1}, m^{n-1}), the statistics are
quadratures against f(., t_{n-1}), and each component advances by one
Fokker-Planck step.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import datasets, estep, fp_solver, kernels
from .datasets import DataDensity, DensityField
from .drift import DriftSpec, build_drift
from .gaussian_oracle import GaussianMoments, eval_density
from .grid import SpatialGrid, TimeGrid, build_spatial_grid, build_time_grid, nodes_from_cell_measure

MODELS = ("static", "instantaneous", "asym_averaged", "sym_averaged")

STATIC_INIT_TOL = 1e-8
STATIC_INIT_MAX_ITER = 500


class DriverError(RuntimeError):
    pass


class DegenerateInitError(DriverError):
    """Initialization converged with an empty component twice in a row."""


class ConfigError(ValueError):
    pass


def worker_count() -> int:
    """Worker cap from MFG_EVOCLUST_THREADS (default 1 = serial)."""
    try:
        return max(1, int(os.environ.get("MFG_EVOCLUST_THREADS", "1")))
    except ValueError:
        return 1


def _map_components(fn, items):
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass
class RunConfig:
    """Everything needed to reproduce a run."""

    model: str
    dataset_kind: str                      # test1 | test2 | gridded_sequence
    T: float
    dt: float
    eps: float
    K: int
    bounds: tuple = ()                     # () = dataset default box
    nodes_per_axis: tuple = ()             # alternative: cell_measure
    cell_measure: float | None = None
    tau: float = 0.0
    kernel: str | None = None              # default chosen from the model
    seed: int = 0
    fixed_point_tol: float = 1e-6
    max_iterations: int = 50
    damping: float = 1.0
    cfl_max: float | None = 1.0
    sym_diff: str = "backward"             # or "centered", fixed-point loop only
    dataset_radii: tuple | None = None     # test2 override
    dataset_csv: str | None = None         # gridded_sequence input
    dataset_sidecar: str | None = None
    snapshots: tuple = ()

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.T <= 0 or self.dt <= 0 or self.dt > self.T:
            raise ConfigError("need 0 < dt <= T")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.kernel is None and self.model == "asym_averaged":
            self.kernel = "asymmetric"
        if self.kernel is None and self.model == "sym_averaged":
            self.kernel = "symmetric"
        if self.model in ("asym_averaged", "sym_averaged"):
            if self.kernel != "dirac" and not self.tau > 0:
                raise ConfigError(f"model {self.model} requires tau > 0")
        if self.model == "sym_averaged":
            if not (self.fixed_point_tol > 0 and self.max_iterations >= 1):
                raise ConfigError("sym_averaged requires fixed_point_tol > 0 and max_iterations >= 1")
            if not 0 < self.damping <= 1:
                raise ConfigError("damping must lie in (0, 1]")
        if self.sym_diff not in ("backward", "centered"):
            raise ConfigError(f"unknown sym_diff {self.sym_diff!r}")

    def default_bounds(self) -> tuple:
        if self.bounds:
            return tuple(tuple(b) for b in self.bounds)
        if self.dataset_kind == "test1":
            return ((0.0, 1.0),)
        if self.dataset_kind == "test2":
            return ((0.0, 1.0), (0.0, 1.0))
        raise ConfigError("gridded_sequence runs take the grid from the sidecar")


def build_problem(config: RunConfig) -> tuple[DataDensity, SpatialGrid, TimeGrid]:
    """Materialize dataset, spatial grid and time grid from a config."""
    if config.dataset_kind == "gridded_sequence":
        if not config.dataset_csv:
            raise ConfigError("gridded_sequence needs dataset_csv")
        density = datasets.load_gridded_sequence(config.dataset_csv, config.dataset_sidecar)
        grid = density.sequence_grid
    else:
        density = DataDensity(kind=config.dataset_kind, radii=config.dataset_radii)
        bounds = config.default_bounds()
        if config.nodes_per_axis:
            nodes = config.nodes_per_axis
        elif config.cell_measure:
            nodes = nodes_from_cell_measure(bounds, config.cell_measure)
        else:
            raise ConfigError("give nodes_per_axis or cell_measure")
        grid = build_spatial_grid(bounds, nodes)
    tau = config.tau if config.kernel in ("asymmetric", "symmetric") else 0.0
    tgrid = build_time_grid(config.T, config.dt, tau)
    return density, grid, tgrid


@dataclass
class Trajectory:
    """Everything the metrics and CLI layers consume."""

    model: str
    grid: SpatialGrid
    time_grid: TimeGrid
    alpha: np.ndarray                  # (N+1, K) raw E-step weights
    mu: np.ndarray                     # (N+1, K, d)
    sigma: np.ndarray                  # (N+1, K, d, d)
    frozen: np.ndarray                 # (N+1, K) bool
    densities: np.ndarray              # (N+1, K, M)
    mixture_weights: np.ndarray        # (N+1, K); smoothed for averaged models
    smoothed: kernels.SmoothedStats | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.alpha.shape[0] - 1

    def mixture_values(self, n: int) -> np.ndarray:
        return self.mixture_weights[n] @ self.densities[n]

    def component_means(self, n: int) -> np.ndarray:
        """Measured (quadrature) means of the component densities at node n."""
        h = self.grid.cell_measure
        w = self.densities[n] * h                      # (K, M)
        mass = np.maximum(w.sum(axis=1), 1e-300)
        return (w @ self.grid.barycenters) / mass[:, None]


def gridded_gaussian(grid: SpatialGrid, mu, sigma) -> np.ndarray:
    """Unit-mass grid sampling of a Gaussian density."""
    vals = eval_density(GaussianMoments(mu, sigma), grid.barycenters)
    mass = grid.cell_measure * vals.sum()
    if mass <= 1e-300:
        raise DriverError("component escaped the computational box")
    return vals / mass


def _estep(alpha, comp_values, f_field, prev_mu=None, prev_sigma=None):
    """Responsibilities + statistics, carrying stats forward for frozen components."""
    comps = [DensityField(f_field.grid, v, f_field.t) for v in comp_values]
    resp = estep.responsibilities(alpha, comps)
    stats = estep.estep_stats(resp, f_field)
    if prev_mu is not None and stats.frozen.any():
        stats.mu[stats.frozen] = prev_mu[stats.frozen]
        stats.sigma[stats.frozen] = prev_sigma[stats.frozen]
    return resp, stats


def static_init(f0: DensityField, K: int, seed: int,
                tol: float = STATIC_INIT_TOL, max_iter: int = STATIC_INIT_MAX_ITER):
    """Static soft clustering of a single frame.

    Means are seeded by farthest-point sampling on the f-weighted nodes, then
    the E-step and the Gaussian reset m_k = N(mu_k, Sigma_k) are iterated to a
    fixed point of the weight vector.  Returns (values (K, M), alpha, mu,
    sigma, n_iterations).  A converged empty component triggers one reseed.
    """
    grid = f0.grid
    for attempt in range(2):
        rng = np.random.default_rng(seed + attempt)
        alpha, mu, sigma = _seed_clusters(f0, K, rng)
        values = np.stack([gridded_gaussian(grid, mu[k], sigma[k]) for k in range(K)])
        n_it = 0
        for n_it in range(1, max_iter + 1):
            _, stats = _estep(alpha, values, f0, mu, sigma)
            delta = np.abs(stats.alpha - alpha).max()
            alpha, mu, sigma = stats.alpha, stats.mu, stats.sigma
            alpha = alpha / alpha.sum()
            values = np.stack([gridded_gaussian(grid, mu[k], sigma[k]) for k in range(K)])
            if delta < tol:
                break
        if not (alpha < estep.ALPHA_FLOOR).any():
            return values, alpha, mu, sigma, n_it
    raise DegenerateInitError(
        f"initialization left a component below weight {estep.ALPHA_FLOOR} twice"
    )


def _seed_clusters(f0: DensityField, K: int, rng):
    """Farthest-point seeds on the support, then hard-assignment moments."""
    grid = f0.grid
    x = grid.barycenters
    w = f0.values * grid.cell_measure
    support = np.flatnonzero(f0.values > 0)
    if support.size < K:
        raise DegenerateInitError(f"support has {support.size} nodes, need K={K}")
    seeds = [int(rng.choice(support, p=w[support] / w[support].sum()))]
    for _ in range(K - 1):
        d2 = np.min(
            ((x[support][:, None, :] - x[seeds][None, :, :]) ** 2).sum(-1), axis=1
        )
        seeds.append(int(support[int(np.argmax(d2))]))

    assign = np.argmin(((x[:, None, :] - x[seeds][None, :, :]) ** 2).sum(-1), axis=1)
    d = grid.dim
    alpha = np.empty(K)
    mu = np.empty((K, d))
    sigma = np.empty((K, d, d))
    floor = estep.sigma_floor(grid)
    for k in range(K):
        wk = np.where(assign == k, w, 0.0)
        mass = wk.sum()
        if mass <= 0:
            wk = np.zeros_like(w)
            wk[seeds[k]] = 1.0
            mass = 1.0
        alpha[k] = mass
        mu[k] = (wk @ x) / mass
        z = x - mu[k]
        sigma[k] = np.einsum("i,ij,ik->jk", wk, z, z) / mass + floor * np.eye(d)
    return alpha / alpha.sum(), mu, sigma


def _kernel_for(config: RunConfig) -> kernels.TemporalKernel | None:
    if config.model in ("asym_averaged", "sym_averaged"):
        tau = None if config.kernel == "dirac" else config.tau
        return kernels.discretize_kernel(config.kernel, tau, config.dt)
    return None


def _causal_smoothed_at(series: np.ndarray, n_abs: int, kernel: kernels.TemporalKernel):
    """Smoothed value at absolute index n_abs of a past-padded series."""
    idx = n_abs - kernel.offsets
    return np.tensordot(kernel.weights * kernel.dt, series[idx], axes=1)


def run_sequential(config: RunConfig, density: DataDensity | None = None,
                   grid: SpatialGrid | None = None,
                   tgrid: TimeGrid | None = None) -> Trajectory:
    """Sequential models: static baseline, instantaneous, causal-averaged."""
    if config.model == "sym_averaged":
        raise DriverError("symmetric model needs run_fixed_point")
    if density is None:
        density, grid, tgrid = build_problem(config)
    if config.model == "static":
        return _run_static(config, density, grid, tgrid)

    N = tgrid.n_steps
    K, d, M = config.K, grid.dim, grid.num_nodes
    kern = _kernel_for(config)
    n_past = kern.past_extent if kern is not None else 0

    f0 = datasets.sample_to_grid(density, grid, 0.0)
    values, a0, mu0, s0, init_iters = static_init(f0, K, config.seed)

    # stats series with n_past constant-in-the-past entries prepended
    alpha = np.empty((n_past + N + 1, K))
    mu = np.empty((n_past + N + 1, K, d))
    sigma = np.empty((n_past + N + 1, K, d, d))
    frozen = np.zeros((N + 1, K), dtype=bool)
    alpha[: n_past + 1] = a0
    mu[: n_past + 1] = mu0
    sigma[: n_past + 1] = s0

    smoothed = None
    if kern is not None:
        s_alpha = np.empty((N + 1, K))
        s_mu = np.empty((N + 1, K, d))
        s_sigma = np.empty((N + 1, K, d, d))
        s_alpha[0], s_mu[0], s_sigma[0] = a0, mu0, s0

    densities = np.empty((N + 1, K, M))
    densities[0] = values
    max_disp = np.zeros(N + 1)

    fwd = lambda n: n + n_past  # forward node -> absolute series index
    for n in range(1, N + 1):
        f_prev = datasets.sample_to_grid(density, grid, tgrid.time(n - 1))
        _, stats = _estep(alpha[fwd(n - 1)], densities[n - 1], f_prev,
                          mu[fwd(n - 1)], sigma[fwd(n - 1)])
        alpha[fwd(n)], mu[fwd(n)], sigma[fwd(n)] = stats.alpha, stats.mu, stats.sigma
        frozen[n] = stats.frozen

        if kern is None:
            spec = build_drift(alpha[n_past:fwd(n) + 1], mu[n_past:fwd(n) + 1],
                               sigma[n_past:fwd(n) + 1], n, config.dt, config.eps)
        elif kern.is_identity:
            s_alpha[n], s_mu[n], s_sigma[n] = alpha[fwd(n)], mu[fwd(n)], sigma[fwd(n)]
            spec = build_drift(s_alpha[: n + 1], s_mu[: n + 1], s_sigma[: n + 1],
                               n, config.dt, config.eps)
        else:
            s_alpha[n] = _causal_smoothed_at(alpha, fwd(n), kern)
            safe = np.maximum(s_alpha[n], 1e-300)
            s_mu[n] = _causal_smoothed_at(alpha[..., None] * mu, fwd(n), kern) / safe[:, None]
            s_sigma[n] = (_causal_smoothed_at(alpha[..., None, None] * sigma, fwd(n), kern)
                          / safe[:, None, None])
            spec = build_drift(s_alpha[: n + 1], s_mu[: n + 1], s_sigma[: n + 1],
                               n, config.dt, config.eps)

        densities[n], disp = _advance(densities[n - 1], spec, config, grid)
        max_disp[n] = disp

    if kern is not None:
        smoothed = kernels.SmoothedStats(s_alpha, s_mu, s_sigma)
        weights = s_alpha
    else:
        weights = alpha[n_past:]

    diag = {
        "init_iterations": init_iters,
        "max_displacement_cells": max_disp,
        "masses": grid.cell_measure * densities.sum(axis=2),
        "kernel_warmup_nodes": n_past,   # nodes with t < tau rely on the past extension
    }
    return Trajectory(config.model, grid, tgrid, alpha[n_past:], mu[n_past:],
                      sigma[n_past:], frozen, densities, weights, smoothed, diag)


def _advance(comp_values, spec: DriftSpec, config: RunConfig, grid: SpatialGrid):
    """One FP step for all components; returns new values and the max CFL number."""
    def one(k):
        try:
            A = fp_solver.assemble_operator(spec.V[k], spec.M[k], config.eps,
                                            config.dt, grid, cfl_max=config.cfl_max)
        except fp_solver.CFLViolationError as exc:
            raise fp_solver.CFLViolationError(
                f"component {k} at t={spec.t:.6g}: {exc}") from exc
        return A.apply(comp_values[k]), A.max_displacement_cells

    results = _map_components(one, range(len(comp_values)))
    new_values = np.stack([r[0] for r in results])
    return new_values, max(r[1] for r in results)


def _run_static(config: RunConfig, density, grid, tgrid) -> Trajectory:
    """Independent per-frame soft clustering; labels aligned frame to frame
    (minimum total mean distance) purely for reporting continuity."""
    N = tgrid.n_steps
    K, d, M = config.K, grid.dim, grid.num_nodes
    alpha = np.empty((N + 1, K))
    mu = np.empty((N + 1, K, d))
    sigma = np.empty((N + 1, K, d, d))
    densities = np.empty((N + 1, K, M))
    iters = np.zeros(N + 1, dtype=int)

    def frame(n):
        f_n = datasets.sample_to_grid(density, grid, tgrid.time(n))
        return static_init(f_n, K, config.seed + n)

    results = _map_components(frame, range(N + 1))
    for n, (vals, a, m, s, n_it) in enumerate(results):
        if n > 0:
            cost = np.abs(m[:, None, :] - mu[n - 1][None, :, :]).sum(-1)
            row, col = linear_sum_assignment(cost)
            order = row[np.argsort(col)]
            vals, a, m, s = vals[order], a[order], m[order], s[order]
        alpha[n], mu[n], sigma[n], densities[n] = a, m, s, vals
        iters[n] = n_it

    diag = {
        "init_iterations": iters,
        "masses": grid.cell_measure * densities.sum(axis=2),
        "max_displacement_cells": np.zeros(N + 1),
    }
    return Trajectory("static", grid, tgrid, alpha, mu, sigma,
                      np.zeros((N + 1, K), dtype=bool), densities, alpha, None, diag)


def run_fixed_point(config: RunConfig, density: DataDensity | None = None,
                    grid: SpatialGrid | None = None,
                    tgrid: TimeGrid | None = None) -> Trajectory:
    """Whole-horizon Picard iteration for the symmetric smoothing model.

    Starting from an instantaneous-model pass, each iteration recomputes the
    E-step statistics along the current trajectory, applies a damped update,
    symmetric-smooths them, rebuilds the drifts, and re-evolves every
    component from the same initialization.  Damping halves automatically
    whenever the alpha residual increases.
    """
    if config.model != "sym_averaged":
        raise DriverError("run_fixed_point is the symmetric-model driver")
    if density is None:
        density, grid, tgrid = build_problem(config)

    N = tgrid.n_steps
    K, d = config.K, grid.dim
    kern = _kernel_for(config)
    n_past = kern.past_extent

    warm_cfg = RunConfig(
        model="instantaneous", dataset_kind=config.dataset_kind, T=config.T,
        dt=config.dt, eps=config.eps, K=config.K, bounds=config.bounds,
        nodes_per_axis=grid.nodes_per_axis, seed=config.seed,
        cfl_max=config.cfl_max, dataset_radii=config.dataset_radii,
        dataset_csv=config.dataset_csv, dataset_sidecar=config.dataset_sidecar,
    )
    traj = run_sequential(warm_cfg, density, grid, tgrid)
    m0 = traj.densities[0].copy()
    init_stats = (traj.alpha[0].copy(), traj.mu[0].copy(), traj.sigma[0].copy())

    f_fields = [datasets.sample_to_grid(density, grid, tgrid.time(n)) for n in range(N + 1)]
    alpha, mu, sigma = traj.alpha.copy(), traj.mu.copy(), traj.sigma.copy()
    frozen = traj.frozen.copy()

    theta = config.damping
    residuals, thetas = [], []
    converged = False
    densities = traj.densities
    smoothed = None
    max_disp = np.zeros(N + 1)
    pad = lambda s: np.concatenate([np.repeat(s[:1], n_past, axis=0), s], axis=0)

    for _ in range(config.max_iterations):
        # smooth the iterate's stats, rebuild drifts, re-evolve from the same m0
        smoothed = kernels.smooth_series(pad(alpha), pad(mu), pad(sigma), kern, n_past)
        drifts = [build_drift(smoothed.alpha, smoothed.mu, smoothed.sigma,
                              n, config.dt, config.eps, diff=config.sym_diff)
                  for n in range(1, N + 1)]
        densities = np.empty_like(densities)
        densities[0] = m0
        for n in range(1, N + 1):
            densities[n], max_disp[n] = _advance(densities[n - 1], drifts[n - 1],
                                                 config, grid)

        # E-step stats along the new trajectory, damped towards the old series
        new_alpha = np.empty_like(alpha)
        new_mu = np.empty_like(mu)
        new_sigma = np.empty_like(sigma)
        new_alpha[0], new_mu[0], new_sigma[0] = init_stats
        for n in range(1, N + 1):
            _, stats = _estep(alpha[n - 1], densities[n - 1], f_fields[n - 1],
                              mu[n - 1], sigma[n - 1])
            new_alpha[n], new_mu[n], new_sigma[n] = stats.alpha, stats.mu, stats.sigma
            frozen[n] = stats.frozen
        new_alpha = theta * new_alpha + (1 - theta) * alpha
        new_mu = theta * new_mu + (1 - theta) * mu
        new_sigma = theta * new_sigma + (1 - theta) * sigma

        residual = float(np.abs(new_alpha - alpha).max())
        residuals.append(residual)
        thetas.append(theta)
        alpha, mu, sigma = new_alpha, new_mu, new_sigma

        if residual < config.fixed_point_tol:
            converged = True
            break
        if len(residuals) >= 2 and residual > residuals[-2]:
            theta = max(theta / 2, 1.0 / 64)

    # the reported smoothed series belongs to the final stats iterate
    smoothed = kernels.smooth_series(pad(alpha), pad(mu), pad(sigma), kern, n_past)

    diag = {
        "fixed_point_residuals": residuals,
        "fixed_point_damping": thetas,
        "fixed_point_converged": converged,
        "fixed_point_iterations": len(residuals),
        "masses": grid.cell_measure * densities.sum(axis=2),
        "max_displacement_cells": max_disp,
        "kernel_warmup_nodes": n_past,
    }
    return Trajectory(config.model, grid, tgrid, alpha, mu, sigma, frozen,
                      densities, smoothed.alpha, smoothed, diag)


def run(config: RunConfig) -> Trajectory:
    """Dispatch on the configured model."""
    density, grid, tgrid = build_problem(config)
    if config.model == "sym_averaged":
        return run_fixed_point(config, density, grid, tgrid)
    return run_sequential(config, density, grid, tgrid)
