"""Closed-form verification channel for the component dynamics.

With affine drift B(x) = V (x - M) and diffusion eps, each component stays
Gaussian and its mean nu and covariance T obey the linear ODE system

    nu' = -V (nu - M)
    T'  = 2 eps I - T V - V T

integrated here with classical RK4.  The oracle provides ground truth for
the PDE solver and for the moment-matching invariants of the drift
construction; it is never part of the production evolution path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OracleError(RuntimeError):
    """Covariance lost positive definiteness, signalling inconsistent drift."""


@dataclass
class GaussianMoments:
    """Mean/covariance state of one Gaussian component at time t."""

    nu: np.ndarray     # (d,)
    T: np.ndarray      # (d, d) SPD
    t: float = 0.0

    def __post_init__(self):
        self.nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        self.T = np.atleast_2d(np.asarray(self.T, dtype=float))
        if np.min(np.linalg.eigvalsh(self.T)) <= 0:
            raise OracleError("covariance must be symmetric positive definite")

    @property
    def dim(self) -> int:
        return self.nu.shape[0]

    @property
    def c(self) -> float:
        """Normalization ((2 pi)^d det T)^(-1/2), derived from T."""
        d = self.dim
        return float(1.0 / np.sqrt((2 * np.pi) ** d * np.linalg.det(self.T)))


def _rhs(nu, T, V, M, eps):
    dnu = -V @ (nu - M)
    dT = 2 * eps * np.eye(T.shape[0]) - T @ V - V @ T
    return dnu, dT


def ode_step(state: GaussianMoments, V, M, eps: float, dt: float) -> GaussianMoments:
    """One step of the coupled (nu, T) system with V, M held constant.

    Integrates with classical RK4; a stiff rate matrix (large ||V|| dt, as the
    narrow mixture components produce) is handled by internal substepping,
    which leaves the piecewise-constant-coefficient semantics unchanged.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    M = np.atleast_1d(np.asarray(M, dtype=float))
    nu, T = state.nu, state.T

    # keep max|lambda| * substep below ~0.5 for RK4 stability and accuracy
    rate = float(np.abs(np.linalg.eigvalsh(V)).max())
    n_sub = max(1, int(np.ceil(2.0 * rate * dt)))
    h = dt / n_sub
    for _ in range(n_sub):
        k1n, k1t = _rhs(nu, T, V, M, eps)
        k2n, k2t = _rhs(nu + 0.5 * h * k1n, T + 0.5 * h * k1t, V, M, eps)
        k3n, k3t = _rhs(nu + 0.5 * h * k2n, T + 0.5 * h * k2t, V, M, eps)
        k4n, k4t = _rhs(nu + h * k3n, T + h * k3t, V, M, eps)
        nu = nu + h * (k1n + 2 * k2n + 2 * k3n + k4n) / 6
        T = T + h * (k1t + 2 * k2t + 2 * k3t + k4t) / 6
        T = (T + T.T) / 2

    if np.min(np.linalg.eigvalsh(T)) <= 0:
        raise OracleError(f"covariance lost positive definiteness at t={state.t + dt}")
    return GaussianMoments(nu, T, state.t + dt)


def integrate(state: GaussianMoments, Vs, Ms, eps: float, dt: float) -> list[GaussianMoments]:
    """Integrate through a sequence of per-step (V, M) pairs.

    Returns the n_steps + 1 states including the initial one.
    """
    out = [state]
    for V, M in zip(Vs, Ms):
        state = ode_step(state, V, M, eps, dt)
        out.append(state)
    return out


def integrate_scripted(state: GaussianMoments, V_of_t, M_of_t, eps: float,
                       dt: float, n_steps: int) -> list[GaussianMoments]:
    """RK4 with time-dependent coefficients evaluated at the stage times.

    Used for scripted-drift scenarios where V(t), M(t) are known in closed
    form; the per-step coefficient freezing of :func:`ode_step` would
    otherwise dominate the error budget.
    """
    out = [state]
    for _ in range(n_steps):
        t0 = state.t
        nu, T = state.nu, state.T

        def f(nu_, T_, t_):
            return _rhs(nu_, T_, np.atleast_2d(V_of_t(t_)), np.atleast_1d(M_of_t(t_)), eps)

        k1n, k1t = f(nu, T, t0)
        k2n, k2t = f(nu + 0.5 * dt * k1n, T + 0.5 * dt * k1t, t0 + 0.5 * dt)
        k3n, k3t = f(nu + 0.5 * dt * k2n, T + 0.5 * dt * k2t, t0 + 0.5 * dt)
        k4n, k4t = f(nu + dt * k3n, T + dt * k3t, t0 + dt)
        nu1 = nu + dt * (k1n + 2 * k2n + 2 * k3n + k4n) / 6
        T1 = T + dt * (k1t + 2 * k2t + 2 * k3t + k4t) / 6
        T1 = (T1 + T1.T) / 2
        if np.min(np.linalg.eigvalsh(T1)) <= 0:
            raise OracleError(f"covariance lost positive definiteness at t={t0 + dt}")
        state = GaussianMoments(nu1, T1, t0 + dt)
        out.append(state)
    return out


def eval_density(state: GaussianMoments, x) -> np.ndarray:
    """Exact Gaussian density at point(s) x of shape (..., d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and state.dim == 1:
        x = x[:, None]
    z = x - state.nu
    Tinv = np.linalg.inv(state.T)
    quad = np.einsum("...i,ij,...j->...", z, Tinv, z)
    return state.c * np.exp(-0.5 * quad)


def grid_moments(field) -> tuple[float, np.ndarray, np.ndarray]:
    """Quadrature (mass, mean, covariance) of a gridded density field."""
    x = field.grid.barycenters
    w = field.values * field.grid.cell_measure
    mass = float(w.sum())
    if mass <= 0:
        d = field.grid.dim
        return mass, np.zeros(d), np.zeros((d, d))
    mean = (w @ x) / mass
    z = x - mean
    cov = np.einsum("i,ij,ik->jk", w, z, z) / mass
    return mass, mean, cov


def logc_drift_residual(states: list[GaussianMoments], Vs, eps: float, dt: float) -> float:
    """Consistency check between the derived and the ODE-propagated normalizations.

    Integrates l' = tr(V) - eps tr(T^{-1}) alongside the trajectory (trapezoid
    in time) and returns the max relative gap between exp(l) and c(T).
    """
    logc = np.log(states[0].c)
    worst = 0.0
    for n, V in enumerate(Vs):
        V = np.atleast_2d(np.asarray(V, dtype=float))
        r0 = np.trace(V) - eps * np.trace(np.linalg.inv(states[n].T))
        r1 = np.trace(V) - eps * np.trace(np.linalg.inv(states[n + 1].T))
        logc += dt * (r0 + r1) / 2
        worst = max(worst, abs(np.exp(logc) - states[n + 1].c) / states[n + 1].c)
    return worst
