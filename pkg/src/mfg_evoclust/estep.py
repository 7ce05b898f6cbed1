"""Quadrature E-step: responsibilities and per-component statistics.

Given mixture weights alpha_k and component fields m_k on a common grid, the
responsibilities are the Bayes ratios

    gamma_k(x_i) = alpha_k m_k(x_i) / sum_j alpha_j m_j(x_i)

and the statistics are first-order quadratures against the data density f:

    alpha_k = h sum_i gamma_k(x_i) f_i
    mu_k    = (h / alpha_k) sum_i x_i gamma_k(x_i) f_i
    Sigma_k = (h / alpha_k) sum_i (x_i - mu_k)(x_i - mu_k)^T gamma_k(x_i) f_i
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import DensityField
from .grid import SpatialGrid

# nodes where the whole mixture carries less mass than this get uniform
# responsibilities; they contribute nothing to the quadratures
DENOMINATOR_GUARD = 1e-30

# components whose weight drops below this are flagged frozen
ALPHA_FLOOR = 1e-8

# eigenvalue floor for Sigma_k is SIGMA_FLOOR_COEF * (largest domain extent)^2
SIGMA_FLOOR_COEF = 1e-6


class EStepError(ValueError):
    pass


@dataclass
class ResponsibilityField:
    """Per-node membership probabilities gamma_k(x_i), shape (K, M)."""

    grid: SpatialGrid
    gamma: np.ndarray
    t: float


@dataclass
class EStepStats:
    """Weights, means and covariances of the K components at one time."""

    alpha: np.ndarray    # (K,)
    mu: np.ndarray       # (K, d)
    sigma: np.ndarray    # (K, d, d)
    t: float
    frozen: np.ndarray   # (K,) bool, weight below ALPHA_FLOOR


def sigma_floor(grid: SpatialGrid) -> float:
    return SIGMA_FLOOR_COEF * max(grid.extents) ** 2


def responsibilities(weights, components: list[DensityField]) -> ResponsibilityField:
    """Pointwise Bayes ratios with a guarded denominator.

    All component fields must live on the same grid.  Where the weighted
    mixture falls below ``DENOMINATOR_GUARD`` the responsibilities are set to
    the uniform value 1/K, preserving sum_k gamma_k = 1.
    """
    alpha = np.asarray(weights, dtype=float)
    if np.any(alpha < 0):
        raise EStepError("negative mixture weight")
    if abs(alpha.sum() - 1.0) > 1e-8:
        raise EStepError(f"weights must sum to 1, got {alpha.sum()!r}")
    grid = components[0].grid
    for c in components[1:]:
        if not grid.same_layout(c.grid):
            raise EStepError("component fields live on mismatched grids")
    K = len(components)
    weighted = alpha[:, None] * np.stack([c.values for c in components])
    den = weighted.sum(axis=0)
    low = den < DENOMINATOR_GUARD
    gamma = np.where(low, 1.0 / K, weighted / np.where(low, 1.0, den))
    return ResponsibilityField(grid, gamma, components[0].t)


def estep_stats(resp: ResponsibilityField, f: DensityField) -> EStepStats:
    """Per-component weight, mean and covariance by first-order quadrature.

    Covariances are symmetrized and eigenvalue-floored.  Components with
    weight below ``ALPHA_FLOOR`` are flagged frozen instead of raising; their
    mean/covariance entries are computed with a guarded weight and should be
    replaced by the caller (the driver carries the previous values forward).
    """
    if not resp.grid.same_layout(f.grid):
        raise EStepError("responsibilities and data live on mismatched grids")
    grid = resp.grid
    h = grid.cell_measure
    x = grid.barycenters                      # (M, d)
    gf = resp.gamma * f.values                # (K, M)

    alpha = h * gf.sum(axis=1)
    frozen = alpha < ALPHA_FLOOR
    safe = np.maximum(alpha, ALPHA_FLOOR)

    mu = h * (gf @ x) / safe[:, None]
    z = x[None, :, :] - mu[:, None, :]        # (K, M, d)
    sigma = h * np.einsum("km,kmi,kmj->kij", gf, z, z) / safe[:, None, None]
    sigma = (sigma + np.transpose(sigma, (0, 2, 1))) / 2

    floor = sigma_floor(grid)
    for k in range(sigma.shape[0]):
        w, Q = np.linalg.eigh(sigma[k])
        if w.min() < floor:
            sigma[k] = (Q * np.maximum(w, floor)) @ Q.T
            sigma[k] = (sigma[k] + sigma[k].T) / 2

    return EStepStats(alpha=alpha, mu=mu, sigma=sigma, t=f.t, frozen=frozen)
