"""Temporal smoothing kernels and discrete convolution of parameter series.

Three kernel kinds are supported:

* ``dirac``      -- identity smoothing (reduces the averaged model to the
                    instantaneous one, bit for bit);
* ``asymmetric`` -- causal exponential window on [0, tau],
                    g(s) = (e^-s - e^-tau) / (1 - e^-tau (1 + tau));
* ``symmetric``  -- compactly supported mollifier on [-tau/2, tau/2],
                    g(s) = 2/(tau C) exp(-1 / (1 - (2s/tau)^2)).

Series smoothing uses endpoint sampling with post-hoc weight renormalization
so that sum_j w_j dt = 1 exactly; this keeps the smoothed weights on the unit
simplex.  The left window edge uses the constant-in-the-past extension of the
data; the right edge (symmetric kernel only) truncates to available nodes and
renormalizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# integral of exp(-1/(1-s^2)) over [-1, 1]; verified against adaptive and
# Gauss-Legendre quadrature, which agree to ~1e-14 (see tests)
MOLLIFIER_CONSTANT = 0.4439938161680794

KINDS = ("dirac", "asymmetric", "symmetric")


class KernelError(ValueError):
    pass


class InsufficientHistoryError(KernelError):
    """The smoothing window reaches beyond the extended series."""


def asym_kernel(s, tau: float):
    """Causal exponential kernel on [0, tau], zero outside; g(tau) = 0."""
    if tau <= 0:
        raise KernelError("tau must be positive")
    s = np.asarray(s, dtype=float)
    norm = 1.0 - np.exp(-tau) * (1.0 + tau)
    vals = np.where((s >= 0) & (s <= tau), (np.exp(-s) - np.exp(-tau)) / norm, 0.0)
    return vals if vals.ndim else float(vals)


def sym_kernel(s, tau: float):
    """Symmetric mollifier on (-tau/2, tau/2), zero at and beyond the endpoints."""
    if tau <= 0:
        raise KernelError("tau must be positive")
    s = np.asarray(s, dtype=float)
    u = 2.0 * s / tau
    inside = np.abs(u) < 1.0
    safe = np.where(inside, u, 0.0)
    vals = np.where(
        inside,
        (2.0 / (tau * MOLLIFIER_CONSTANT)) * np.exp(-1.0 / (1.0 - safe**2)),
        0.0,
    )
    return vals if vals.ndim else float(vals)


@dataclass(frozen=True)
class TemporalKernel:
    """Discrete smoothing weights on time-grid offsets.

    ``offsets`` are integer multiples of dt, positive = towards the past
    (the smoothed value at t_n combines series entries at t_{n - offset}).
    Weights satisfy sum_j w_j dt = 1 after renormalization.
    """

    kind: str
    tau: float
    dt: float
    offsets: np.ndarray   # (J,) int
    weights: np.ndarray   # (J,) float

    @property
    def is_identity(self) -> bool:
        return self.kind == "dirac"

    @property
    def past_extent(self) -> int:
        return int(self.offsets.max(initial=0))

    @property
    def future_extent(self) -> int:
        return int(-self.offsets.min(initial=0))


def discretize_kernel(kind: str, tau: float | None, dt: float) -> TemporalKernel:
    """Sample a kernel at grid offsets and renormalize to unit discrete mass."""
    if kind not in KINDS:
        raise KernelError(f"unknown kernel kind {kind!r}")
    if dt <= 0:
        raise KernelError("dt must be positive")
    if kind == "dirac":
        return TemporalKernel("dirac", 0.0, dt, np.array([0]), np.array([1.0 / dt]))
    if tau is None or tau < dt:
        raise KernelError(f"kernel window tau={tau} must cover at least one step dt={dt}")

    if kind == "asymmetric":
        J = int(np.floor(tau / dt + 1e-9))
        offsets = np.arange(J + 1)
        raw = asym_kernel(offsets * dt, tau)
    else:
        J = int(np.floor(tau / 2 / dt + 1e-9))
        offsets = np.arange(-J, J + 1)
        raw = sym_kernel(offsets * dt, tau)
    weights = raw / (raw.sum() * dt)
    return TemporalKernel(kind, float(tau), float(dt), offsets, weights)


def smooth_array(series: np.ndarray, kernel: TemporalKernel, n_past: int = 0) -> np.ndarray:
    """Discrete convolution of a time series with the kernel weights.

    ``series`` has shape (n_past + N + 1, ...); the first ``n_past`` entries
    are the constant-in-the-past extension.  Returns the smoothed values at
    the N + 1 forward nodes.  The right boundary (non-causal kernels only)
    truncates the window to available nodes and renormalizes.
    """
    if kernel.is_identity:
        return series[n_past:]
    if kernel.past_extent > n_past:
        raise InsufficientHistoryError(
            f"window needs {kernel.past_extent} past nodes, series extends {n_past}"
        )
    series = np.asarray(series, dtype=float)
    n_out = series.shape[0] - n_past
    out = np.empty((n_out,) + series.shape[1:])
    w_dt = kernel.weights * kernel.dt
    for n in range(n_out):
        idx = n + n_past - kernel.offsets
        valid = idx < series.shape[0]
        w = w_dt[valid]
        out[n] = np.tensordot(w / w.sum(), series[idx[valid]], axes=1)
    return out


@dataclass
class SmoothedStats:
    """Kernel-smoothed mixture statistics at the forward time nodes.

    alpha_t = g * alpha,  mu_t = g * (alpha mu) / g * alpha,
    sigma_t = g * (alpha sigma) / g * alpha, componentwise in k.
    """

    alpha: np.ndarray    # (N+1, K)
    mu: np.ndarray       # (N+1, K, d)
    sigma: np.ndarray    # (N+1, K, d, d)


def smooth_series(alpha: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                  kernel: TemporalKernel, n_past: int = 0) -> SmoothedStats:
    """Smooth a stats series (arrays over time, past extension included).

    The dirac kernel returns the raw forward series unchanged, making the
    averaged model coincide with the instantaneous one exactly.
    """
    if kernel.is_identity:
        return SmoothedStats(alpha[n_past:], mu[n_past:], sigma[n_past:])
    sa = smooth_array(alpha, kernel, n_past)
    sam = smooth_array(alpha[..., None] * mu, kernel, n_past)
    sas = smooth_array(alpha[..., None, None] * sigma, kernel, n_past)
    safe = np.maximum(sa, 1e-300)
    return SmoothedStats(sa, sam / safe[..., None], sas / safe[..., None, None])


def smoothing_correction(alpha: np.ndarray, mu: np.ndarray,
                         kernel: TemporalKernel, n_past: int = 0) -> np.ndarray:
    """Omitted second-order covariance term of the time-averaged maximizer.

    Returns g*(alpha (mu - mu_t)(mu - mu_t)^T) / g*alpha at each forward node
    (shape (N+1, K, d, d)), the inter-temporal centroid variability dropped
    from the smoothed-covariance update under the slow-drift assumption.
    """
    if kernel.is_identity:
        return np.zeros(mu[n_past:].shape + (mu.shape[-1],))
    outer = mu[..., :, None] * mu[..., None, :]
    sa = smooth_array(alpha, kernel, n_past)
    sam = smooth_array(alpha[..., None] * mu, kernel, n_past)
    samm = smooth_array(alpha[..., None, None] * outer, kernel, n_past)
    safe = np.maximum(sa, 1e-300)
    mu_t = sam / safe[..., None]
    return samm / safe[..., None, None] - mu_t[..., :, None] * mu_t[..., None, :]
