"""Analytic time-dependent reference densities and their gridded sampling.

Two synthetic datasets are built in:

* ``test1`` -- 1D mixture of three moving indicator blocks,
  f(x,t) = (1/0.98) * sum_k c_k 1[x in I_k(t)] with I_k(t) = [a_k+v_k t, b_k+v_k t].
* ``test2`` -- 2D mixture of three moving balls,
  f(x,t) = (1/(0.0825 pi)) * sum_k c_k 1[|x - y_k(t)| <= r_k].

Both are extended constantly into the past: f(x, s) = f(x, 0) for s < 0.
External data enters as a ``gridded_sequence`` (CSV plus JSON sidecar).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import SpatialGrid, build_spatial_grid

TEST1_A = np.array([0.12, 0.37, 0.6])
TEST1_B = np.array([0.18, 0.42, 0.9])
TEST1_V = np.array([0.1, 0.1, -0.1])
TEST1_C = np.array([3.0, 7.0, 1.5])
TEST1_NORM = 0.98  # sum_k c_k (b_k - a_k)

TEST2_C = np.array([1.0, 2.0, 0.5])
TEST2_MASS_CONST = 0.0825  # required value of sum_k c_k r_k^2
# equal radii satisfying sum c_k r^2 = 0.0825
TEST2_DEFAULT_RADIUS = float(np.sqrt(TEST2_MASS_CONST / TEST2_C.sum()))


class DatasetError(ValueError):
    """Inconsistent dataset parameters or unsupported operation."""


@dataclass
class DensityField:
    """Nonnegative gridded density at one time instant."""

    grid: SpatialGrid
    values: np.ndarray
    t: float

    def mass(self) -> float:
        return self.grid.quadrature(self.values)

    def normalized(self) -> "DensityField":
        m = self.mass()
        if m <= 0:
            raise DatasetError(f"cannot normalize field with mass {m}")
        return DensityField(self.grid, self.values / m, self.t)


def eval_test1(x, t: float):
    """Evaluate the 1D indicator-mixture density at position(s) x and time t.

    Intervals are sampled half-open, [a_k + v_k t, b_k + v_k t): when a moving
    edge lands exactly on a grid node this counts the node once instead of
    twice, so the sampled block masses stay steady across alignment instants.
    For t < 0 the dataset is frozen at its t = 0 state.
    """
    t = max(float(t), 0.0)
    x = np.asarray(x, dtype=float)
    lo = TEST1_A + TEST1_V * t
    hi = TEST1_B + TEST1_V * t
    inside = (x[..., None] >= lo) & (x[..., None] < hi)
    vals = inside @ TEST1_C / TEST1_NORM
    return vals if vals.ndim else float(vals)


def test2_centers(t: float) -> np.ndarray:
    t = max(float(t), 0.0)
    return np.array(
        [
            [0.5, 0.5 - 0.25 * t],
            [0.75 * t, 1.0 - 0.3 * t],
            [0.75 * t, 0.75 * t],
        ]
    )


def eval_test2(x, t: float, radii=None):
    """Evaluate the 2D ball-mixture density at point(s) x (shape (..., 2))."""
    radii = _checked_radii(radii)
    x = np.asarray(x, dtype=float)
    centers = test2_centers(t)
    d2 = ((x[..., None, :] - centers) ** 2).sum(axis=-1)
    inside = d2 <= radii**2
    vals = inside @ TEST2_C / (TEST2_MASS_CONST * np.pi)
    return vals if vals.ndim else float(vals)


def _checked_radii(radii) -> np.ndarray:
    if radii is None:
        return np.full(3, TEST2_DEFAULT_RADIUS)
    radii = np.asarray(radii, dtype=float)
    if radii.shape != (3,):
        raise DatasetError("test2 expects exactly 3 radii")
    budget = float(TEST2_C @ radii**2)
    if abs(budget - TEST2_MASS_CONST) > 1e-12:
        raise DatasetError(
            f"radii violate the unit-mass constraint sum c_k r_k^2 = {TEST2_MASS_CONST}"
            f" (got {budget!r})"
        )
    return radii


@dataclass
class DataDensity:
    """Time-dependent reference density f(x, t).

    kind is one of ``test1``, ``test2``, ``gridded_sequence``.  For the
    gridded kind, ``sequence`` holds one row of node values per time node of
    ``sequence_times`` on ``sequence_grid``.
    """

    kind: str
    radii: np.ndarray | None = None                     # test2 only
    sequence_grid: SpatialGrid | None = field(default=None, repr=False)
    sequence: np.ndarray | None = field(default=None, repr=False)
    sequence_times: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("test1", "test2", "gridded_sequence"):
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "test2":
            self.radii = _checked_radii(self.radii)
        if self.kind == "gridded_sequence":
            if self.sequence is None or self.sequence_grid is None or self.sequence_times is None:
                raise DatasetError("gridded_sequence needs grid, values and times")

    @property
    def dim(self) -> int:
        if self.kind == "test1":
            return 1
        if self.kind == "test2":
            return 2
        return self.sequence_grid.dim

    def evaluate(self, points: np.ndarray, t: float) -> np.ndarray:
        if self.kind == "test1":
            return eval_test1(points[..., 0], t)
        if self.kind == "test2":
            return eval_test2(points, t)
        raise DatasetError("gridded_sequence has no pointwise evaluator; use sample_to_grid")

    def _sequence_frame(self, t: float) -> np.ndarray:
        times = self.sequence_times
        t = max(float(t), float(times[0]))
        i = int(np.argmin(np.abs(times - t)))
        return self.sequence[i]


def sample_to_grid(density: DataDensity, grid: SpatialGrid, t: float) -> DensityField:
    """Sample f(., t) at the grid barycenters, renormalized to unit mass.

    Renormalization removes the O(h) quadrature error of indicator edges so
    that downstream weight normalizations hold exactly.
    """
    if density.kind == "gridded_sequence":
        if not grid.same_layout(density.sequence_grid):
            raise DatasetError("gridded_sequence was defined on a different grid")
        values = density._sequence_frame(t).copy()
    else:
        if grid.dim != density.dim:
            raise DatasetError(f"{density.kind} is {density.dim}D, grid is {grid.dim}D")
        values = density.evaluate(grid.barycenters, t)
    if np.any(values < 0):
        raise DatasetError("negative density values")
    return DensityField(grid, values, float(t)).normalized()


def exact_centroids(density: DataDensity, t: float) -> np.ndarray:
    """Analytic per-component centroids, shape (K, d)."""
    t = max(float(t), 0.0)
    if density.kind == "test1":
        return ((TEST1_A + TEST1_B) / 2 + TEST1_V * t)[:, None]
    if density.kind == "test2":
        return test2_centers(t)
    raise DatasetError("exact centroids are only defined for the synthetic datasets")


def load_gridded_sequence(csv_path, sidecar_path=None) -> DataDensity:
    """Load an external dataset: CSV ``t,i0[,i1],value`` + JSON grid sidecar.

    The sidecar carries ``{"bounds": [[lo, hi], ...], "nodes_per_axis": [...]}``.
    Every frame is renormalized to unit mass on load.
    """
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    grid = build_spatial_grid(meta["bounds"], meta["nodes_per_axis"])
    d = grid.dim

    frames: dict[float, np.ndarray] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["t", "i0"] + (["i1"] if d == 2 else []) + ["value"]
        if [c.strip() for c in header] != expected:
            raise DatasetError(f"expected CSV header {expected}, got {header}")
        for row in reader:
            t = float(row[0])
            idx = tuple(int(v) for v in row[1:-1])
            value = float(row[-1])
            frame = frames.setdefault(t, np.zeros(grid.nodes_per_axis))
            frame[idx] = value

    times = np.array(sorted(frames))
    seq = np.stack([frames[t].ravel() for t in times])
    if np.any(seq < 0):
        raise DatasetError("negative values in gridded sequence")
    masses = seq.sum(axis=1) * grid.cell_measure
    if np.any(masses <= 0):
        raise DatasetError("gridded sequence contains a massless frame")
    seq = seq / masses[:, None]
    return DataDensity(
        kind="gridded_sequence",
        sequence_grid=grid,
        sequence=seq,
        sequence_times=times,
    )
