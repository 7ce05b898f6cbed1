"""Affine drift construction B_k(x) = V_k (x - M_k) from mixture statistics.

The rate matrix solves the Sylvester equation

    Sigma V + V Sigma = 2 eps I - Sigma'

(reducing to V = 1/2 Sigma^{-1} (2 eps I - Sigma') when Sigma and Sigma'
commute) and the attractor is M = mu + V^{-1} mu'.  Time derivatives use
backward differences so the instantaneous and causal-averaged models remain
strictly sequential; the symmetric model may opt into centered differences
inside its fixed-point loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estep import ALPHA_FLOOR

# relative commutator norm below which the closed-form V is used
COMMUTATOR_RTOL = 1e-10

# eigenvalues of V are clamped from below by V_FLOOR_COEF / dt
V_FLOOR_COEF = 1e-6


class DriftError(ValueError):
    pass


@dataclass
class DriftSpec:
    """Per-component drift parameters at one time node."""

    V: np.ndarray    # (K, d, d) symmetric positive definite
    M: np.ndarray    # (K, d)
    t: float


def v_floor(dt: float) -> float:
    return V_FLOOR_COEF / dt


def backward_diff(series: np.ndarray, n: int, dt: float) -> np.ndarray:
    """(s_n - s_{n-1}) / dt; zero at n = 0."""
    if n < 0:
        raise DriftError("negative time index")
    if n == 0:
        return np.zeros_like(np.asarray(series[0], dtype=float))
    return (series[n] - series[n - 1]) / dt


def centered_diff(series: np.ndarray, n: int, dt: float) -> np.ndarray:
    """(s_{n+1} - s_{n-1}) / (2 dt), one-sided at the series ends."""
    last = len(series) - 1
    if n == 0:
        return (series[1] - series[0]) / dt
    if n == last:
        return (series[last] - series[last - 1]) / dt
    return (series[n + 1] - series[n - 1]) / (2 * dt)


def compute_V(sigma: np.ndarray, sigma_dot: np.ndarray, eps: float,
              floor: float = 0.0) -> np.ndarray:
    """Rate matrix from covariance and its time derivative.

    Uses the closed form when [Sigma, Sigma'] vanishes (relative tolerance
    ``COMMUTATOR_RTOL``), otherwise the exact Sylvester solution in Sigma's
    eigenbasis.  Eigenvalues of the result are clamped to >= ``floor``.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    sigma_dot = np.atleast_2d(np.asarray(sigma_dot, dtype=float))
    if eps <= 0:
        raise DriftError("eps must be positive")
    if np.linalg.norm(sigma - sigma.T) > 1e-12 * max(np.linalg.norm(sigma), 1e-300):
        raise DriftError("covariance is not symmetric")
    evals = np.linalg.eigvalsh(sigma)
    if evals.min() <= 0:
        raise DriftError("covariance is not positive definite")

    d = sigma.shape[0]
    rhs = 2 * eps * np.eye(d) - sigma_dot
    comm = sigma @ sigma_dot - sigma_dot @ sigma
    tol = COMMUTATOR_RTOL * np.linalg.norm(sigma) * np.linalg.norm(sigma_dot)
    if np.linalg.norm(comm) <= tol:
        V = 0.5 * np.linalg.solve(sigma, rhs)
        V = (V + V.T) / 2
    else:
        lam, Q = np.linalg.eigh(sigma)
        R = Q.T @ rhs @ Q
        V = Q @ (R / (lam[:, None] + lam[None, :])) @ Q.T
        V = (V + V.T) / 2

    if floor > 0:
        w, Q = np.linalg.eigh(V)
        if w.min() < floor:
            V = (Q * np.maximum(w, floor)) @ Q.T
            V = (V + V.T) / 2
    return V


def compute_M(mu: np.ndarray, mu_dot: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Attractor point mu + V^{-1} mu'."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    mu_dot = np.atleast_1d(np.asarray(mu_dot, dtype=float))
    return mu + np.linalg.solve(np.atleast_2d(V), mu_dot)


def build_drift(alpha: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                n: int, dt: float, eps: float,
                diff: str = "backward") -> DriftSpec:
    """Per-component (V_k, M_k) at time index n from a stats series.

    ``alpha``, ``mu``, ``sigma`` are time-major arrays (raw statistics for the
    instantaneous model, kernel-smoothed ones for the averaged models).
    Components whose weight sits below the empty-cluster floor get the
    pure-diffusion placeholder V = v_floor I, M = current mean.
    """
    if diff not in ("backward", "centered"):
        raise DriftError(f"unknown difference scheme {diff!r}")
    deriv = backward_diff if diff == "backward" else centered_diff
    K, d = mu.shape[1], mu.shape[2]
    floor = v_floor(dt)
    mu_dot = deriv(mu, n, dt)
    sigma_dot = deriv(sigma, n, dt)
    V = np.empty((K, d, d))
    M = np.empty((K, d))
    for k in range(K):
        if alpha[n, k] < ALPHA_FLOOR:
            V[k] = floor * np.eye(d)
            M[k] = mu[n, k]
            continue
        V[k] = compute_V(sigma[n, k], sigma_dot[k], eps, floor=floor)
        M[k] = compute_M(mu[n, k], mu_dot[k], V[k])
    return DriftSpec(V=V, M=M, t=n * dt)
