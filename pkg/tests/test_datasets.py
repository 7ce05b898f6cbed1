import json

import numpy as np
import pytest

from mfg_evoclust.datasets import (DataDensity, DatasetError,
                                   TEST2_DEFAULT_RADIUS, eval_test1,
                                   eval_test2, exact_centroids,
                                   load_gridded_sequence, sample_to_grid)
from mfg_evoclust.datasets import test2_centers as centers_of_test2
from mfg_evoclust.grid import build_spatial_grid


def test_eval_test1_inside_first_block():
    assert eval_test1(0.15, 0.0) == pytest.approx(3 / 0.98)


def test_eval_test1_outside_all_blocks():
    assert eval_test1(0.99, 0.0) == 0.0


def test_test1_total_mass_analytic():
    # hand integration: sum_k c_k (b_k - a_k) = 0.18 + 0.35 + 0.45 = 0.98,
    # so the normalized density has unit mass; cross-check by fine quadrature
    g = build_spatial_grid([(0, 1)], 20000)
    for t in [0.0, 0.37, 1.0, 2.3, 4.5]:
        mass = g.quadrature(eval_test1(g.barycenters[:, 0], t))
        assert mass == pytest.approx(1.0, abs=2e-3)


def test_test1_past_extension():
    x = np.linspace(0, 1, 101)
    assert np.array_equal(eval_test1(x, -0.3), eval_test1(x, 0.0))


def test_test2_default_radius_mass_constraint():
    # solve sum c_k r^2 = 0.0825 with the amplitudes summing to 3.5
    assert TEST2_DEFAULT_RADIUS == pytest.approx(np.sqrt(0.0825 / 3.5))
    g = build_spatial_grid([(-0.5, 1.5), (-0.5, 1.5)], 700)
    vals = eval_test2(g.barycenters, 0.5)
    assert g.quadrature(vals) == pytest.approx(1.0, abs=5e-3)


def test_test2_point_in_one_ball():
    # (0.5, 0.5) lies in ball 1 only at t=0 (ball 3 is centred at the origin)
    assert eval_test2(np.array([0.5, 0.5]), 0.0) == pytest.approx(1 / (0.0825 * np.pi))
    assert eval_test2(np.array([-0.4, -0.4]), 0.0) == 0.0


def test_test2_bad_radii_rejected():
    with pytest.raises(DatasetError):
        DataDensity(kind="test2", radii=(0.1, 0.1, 0.1))


def test_test2_custom_radii_accepted():
    r3 = np.sqrt((0.0825 - 1 * 0.15**2 - 2 * 0.12**2) / 0.5)
    d = DataDensity(kind="test2", radii=(0.15, 0.12, r3))
    assert d.radii[2] == pytest.approx(r3)


def test_exact_centroids_test1():
    d = DataDensity(kind="test1")
    c0 = exact_centroids(d, 0.0)
    assert c0[0, 0] == pytest.approx(0.15)
    c1 = exact_centroids(d, 1.0)
    assert c1[2, 0] == pytest.approx((0.6 + 0.9) / 2 - 0.1)


def test_exact_centroids_test2():
    d = DataDensity(kind="test2")
    c = exact_centroids(d, 2.0)
    assert np.allclose(c[0], [0.5, 0.0])
    assert np.allclose(centers_of_test2(2.0)[2], [1.5, 1.5])


def test_sample_to_grid_unit_mass():
    d = DataDensity(kind="test1")
    g = build_spatial_grid([(0, 1)], 100)
    f = sample_to_grid(d, g, 0.0)
    assert f.mass() == pytest.approx(1.0, abs=1e-12)
    assert (f.values >= 0).all()


def test_sample_to_grid_raw_mass_near_one():
    # indicator-edge quadrature error before renormalization stays O(h)
    d = DataDensity(kind="test1")
    g = build_spatial_grid([(0, 1)], 200)
    h = g.cell_measure
    raw = eval_test1(g.barycenters[:, 0], 0.0)
    assert abs(g.quadrature(raw) - 1.0) <= 2 * h


def test_sample_constant_density():
    g = build_spatial_grid([(0, 1)], 50)
    seq = np.ones((1, 50))
    d = DataDensity(kind="gridded_sequence", sequence_grid=g,
                    sequence=seq, sequence_times=np.array([0.0]))
    f = sample_to_grid(d, g, 0.0)
    assert np.allclose(f.values, f.values[0])
    assert f.mass() == pytest.approx(1.0)


def test_gridded_sequence_loader(tmp_path):
    g = build_spatial_grid([(0, 1)], 4)
    csvp = tmp_path / "seq.csv"
    rows = ["t,i0,value"]
    for ti, t in enumerate([0.0, 0.5]):
        vals = [1.0, 2.0, 3.0, 4.0] if ti == 0 else [4.0, 3.0, 2.0, 1.0]
        rows += [f"{t},{i},{v}" for i, v in enumerate(vals)]
    csvp.write_text("\n".join(rows) + "\n")
    (tmp_path / "seq.json").write_text(json.dumps(
        {"bounds": [[0, 1]], "nodes_per_axis": [4]}))
    d = load_gridded_sequence(csvp)
    f0 = sample_to_grid(d, d.sequence_grid, 0.0)
    f1 = sample_to_grid(d, d.sequence_grid, 0.5)
    assert f0.mass() == pytest.approx(1.0, abs=1e-12)
    assert f0.values[3] > f0.values[0]
    assert f1.values[0] > f1.values[3]
    with pytest.raises(DatasetError):
        exact_centroids(d, 0.0)


def test_gridded_sequence_grid_mismatch(tmp_path):
    g_other = build_spatial_grid([(0, 1)], 7)
    g = build_spatial_grid([(0, 1)], 4)
    d = DataDensity(kind="gridded_sequence", sequence_grid=g,
                    sequence=np.ones((1, 4)), sequence_times=np.array([0.0]))
    with pytest.raises(DatasetError):
        sample_to_grid(d, g_other, 0.0)
