"""Cartesian space and uniform time discretizations shared by all solver stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridError(ValueError):
    """Degenerate bounds or otherwise inconsistent grid request."""


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform cell-centered Cartesian grid on a box.

    ``barycenters`` is an (M, d) array of cell centers, row-major with the
    last axis varying fastest.  ``cell_measure`` is the d-dimensional volume
    of one cell, so ``cell_measure * values.sum()`` is the first-order
    quadrature of a gridded function.
    """

    bounds: tuple[tuple[float, float], ...]
    nodes_per_axis: tuple[int, ...]
    cell_measure: float
    edges: tuple[float, ...]          # cell edge length per axis
    axes: tuple[np.ndarray, ...] = field(repr=False)
    barycenters: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def num_nodes(self) -> int:
        return self.barycenters.shape[0]

    @property
    def extents(self) -> tuple[float, ...]:
        return tuple(hi - lo for lo, hi in self.bounds)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def same_layout(self, other: "SpatialGrid") -> bool:
        return self.bounds == other.bounds and self.nodes_per_axis == other.nodes_per_axis

    def quadrature(self, values: np.ndarray) -> float:
        """First-order quadrature h * sum(values) over the grid."""
        return float(self.cell_measure * np.sum(values))


def build_spatial_grid(bounds, nodes_per_axis) -> SpatialGrid:
    """Build a cell-centered grid.

    Parameters
    ----------
    bounds : sequence of (lo, hi) pairs, one per axis (d = 1 or 2)
    nodes_per_axis : int or sequence of ints, cells per axis (>= 2)
    """
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    d = len(bounds)
    if d not in (1, 2):
        raise GridError(f"only 1D and 2D grids are supported, got d={d}")
    if np.isscalar(nodes_per_axis):
        nodes_per_axis = (int(nodes_per_axis),) * d
    else:
        nodes_per_axis = tuple(int(n) for n in nodes_per_axis)
    if len(nodes_per_axis) != d:
        raise GridError("nodes_per_axis length does not match bounds")
    for n in nodes_per_axis:
        if n < 2:
            raise GridError(f"need at least 2 nodes per axis, got {n}")
    for lo, hi in bounds:
        if not hi - lo > 0:
            raise GridError(f"degenerate bounds ({lo}, {hi})")

    edges = tuple((hi - lo) / n for (lo, hi), n in zip(bounds, nodes_per_axis))
    axes = tuple(
        lo + (np.arange(n) + 0.5) * e for (lo, _), n, e in zip(bounds, nodes_per_axis, edges)
    )
    if d == 1:
        barycenters = axes[0][:, None].copy()
    else:
        mesh = np.meshgrid(*axes, indexing="ij")
        barycenters = np.stack([m.ravel() for m in mesh], axis=-1)
    barycenters.setflags(write=False)
    return SpatialGrid(
        bounds=bounds,
        nodes_per_axis=nodes_per_axis,
        cell_measure=float(np.prod(edges)),
        edges=edges,
        axes=axes,
        barycenters=barycenters,
    )


def nodes_from_cell_measure(bounds, cell_measure: float):
    """Per-axis node counts so cells have measure approximately ``cell_measure``.

    The target edge length is ``cell_measure ** (1/d)``; counts are rounded to
    the nearest integer per axis.
    """
    d = len(bounds)
    if cell_measure <= 0:
        raise GridError("cell_measure must be positive")
    edge = cell_measure ** (1.0 / d)
    counts = tuple(max(2, int(round((hi - lo) / edge))) for lo, hi in bounds)
    return counts


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_n = n*dt for n = -n_past .. n_steps.

    ``n_past`` > 0 exposes nodes on [-tau, 0] used by the temporal-smoothing
    models, where the data and the mixture are extended constantly in time.
    """

    dt: float
    n_steps: int      # N_T: number of forward steps, t_{N_T} <= T
    tau: float
    n_past: int

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def time(self, n: int) -> float:
        return n * self.dt

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(-self.n_past, self.n_steps + 1) * self.dt


def build_time_grid(T: float, dt: float, tau: float = 0.0) -> TimeGrid:
    if T <= 0 or dt <= 0:
        raise GridError("T and dt must be positive")
    if dt > T:
        raise GridError(f"dt={dt} exceeds horizon T={T}")
    if tau < 0:
        raise GridError("tau must be nonnegative")
    # tolerate float noise in T/dt so e.g. T=1, dt=0.25 gives N_T=4
    n_steps = int(np.floor(T / dt + 1e-9))
    n_past = int(np.ceil(tau / dt - 1e-9)) if tau > 0 else 0
    return TimeGrid(dt=float(dt), n_steps=n_steps, tau=float(tau), n_past=n_past)
