import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfg_evoclust.grid import (GridError, build_spatial_grid, build_time_grid,
                               nodes_from_cell_measure)


def test_1d_uniform_partition():
    g = build_spatial_grid([(0, 1)], 5)
    assert np.allclose(g.barycenters.ravel(), [0.1, 0.3, 0.5, 0.7, 0.9])
    assert g.cell_measure == pytest.approx(0.2)


def test_2d_product_rule():
    g = build_spatial_grid([(0, 1), (0, 1)], 10)
    assert g.num_nodes == 100
    assert g.cell_measure == pytest.approx(0.01)


def test_test1_resolution_from_cell_measure():
    counts = nodes_from_cell_measure([(0, 1)], 6e-3)
    assert counts == (167,)


def test_degenerate_bounds_rejected():
    with pytest.raises(GridError):
        build_spatial_grid([(1, 1)], 5)
    with pytest.raises(GridError):
        build_spatial_grid([(0, 1)], 1)


def test_barycenters_strictly_inside():
    g = build_spatial_grid([(-2, 3), (0, 1)], (7, 4))
    lo = np.array([b[0] for b in g.bounds])
    hi = np.array([b[1] for b in g.bounds])
    assert (g.barycenters > lo).all() and (g.barycenters < hi).all()


@settings(max_examples=50, deadline=None)
@given(
    lo=st.floats(-100, 100),
    extent=st.floats(1e-3, 200),
    n=st.integers(2, 500),
)
def test_quadrature_exactness(lo, extent, n):
    g = build_spatial_grid([(lo, lo + extent)], n)
    vol = g.quadrature(np.ones(g.num_nodes))
    assert abs(vol - g.volume) <= 1e-12 * g.volume


def test_grid_deterministic():
    a = build_spatial_grid([(0, 1)], 33)
    b = build_spatial_grid([(0, 1)], 33)
    assert np.array_equal(a.barycenters, b.barycenters)
    assert a.cell_measure == b.cell_measure


def test_time_grid_basic():
    tg = build_time_grid(1.0, 0.25)
    assert np.allclose(tg.nodes, [0, 0.25, 0.5, 0.75, 1.0])
    assert tg.n_steps == 4


def test_time_grid_past_extension():
    tg = build_time_grid(1.0, 0.5, tau=0.5)
    assert np.allclose(tg.nodes, [-0.5, 0, 0.5, 1.0])
    assert tg.n_past == 1


def test_time_grid_horizon_invariant():
    tg = build_time_grid(1.1, 0.25)
    assert tg.n_steps * tg.dt <= 1.1 < (tg.n_steps + 1) * tg.dt


def test_time_grid_rejects_dt_over_T():
    with pytest.raises(GridError):
        build_time_grid(0.1, 0.25)
