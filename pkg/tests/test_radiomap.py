import math

import numpy as np
import pytest

from ndtwin.errors import OutOfBounds, SpecMismatch, TruncatedPayload
from ndtwin.frameio import TriangleMesh
from ndtwin.occmap import GridSpec, OccupancyGrid
from ndtwin.radiomap import (RadioMap, ReceiverGridSpec, cdf_at, evaluate_map, interpolate, map_delta, read_map,
                             resample_path, signal_cdf, write_cdf_csv, write_map)
from ndtwin.raytrace import SPEED_OF_LIGHT, TxConfig, build_scene

from conftest import box_mesh, quad_mesh

TX = TxConfig((0.0, 0.0, 2.0))


def free_space(tx, p):
    d = math.dist(tx.position, p)
    return tx.power - 20 * math.log10(4 * math.pi * d * tx.frequency / SPEED_OF_LIGHT)


def field(samples, bounds=None, spacing=1.0, reachable=None):
    samples = np.asarray(samples, float)
    ny, nx = samples.shape
    bounds = bounds or (0.0, 0.0, (nx - 1) * spacing, (ny - 1) * spacing)
    spec = ReceiverGridSpec(bounds, spacing, 1.0)
    reach = np.isfinite(samples) if reachable is None else reachable
    return RadioMap(spec, samples, reach, TX)


def lin_mean_db(values):
    return 10 * math.log10(sum(10 ** (v / 10) for v in values) / len(values))


def test_receiver_grid_shape_and_nodes():
    spec = ReceiverGridSpec((0, 0, 2, 1), 0.5, 1.0)
    assert spec.shape == (3, 5)
    nodes = spec.nodes()
    assert nodes[0].tolist() == [0, 0, 1] and nodes[5].tolist() == [0, 0.5, 1]


def test_empty_scene_free_space_map():
    spec = ReceiverGridSpec((3, 3, 5, 5), 1.0, 1.0)
    m = evaluate_map(build_scene(TriangleMesh.empty()), TX, spec)
    for (x, y, z), v in zip(spec.nodes(), m.samples.ravel()):
        assert v == pytest.approx(free_space(TX, (x, y, z)), abs=1e-9)


def test_dividing_wall_order_zero():
    wall = quad_mesh([(5, -50, -50), (5, 50, -50), (5, 50, 50), (5, -50, 50)])
    spec = ReceiverGridSpec((1, -2, 9, 2), 1.0, 1.0)
    m = evaluate_map(build_scene(wall), TX, spec, max_order=0)
    for (x, y, z), v in zip(spec.nodes(), m.samples.ravel()):
        expect = free_space(TX, (x, y, z)) - (10.0 if x > 5 else 0.0)
        assert v == pytest.approx(expect, abs=0.5)


def test_bvh_and_brute_force_maps_identical():
    mesh = box_mesh((2, 2, 0), (3, 5, 2.5))
    scene = build_scene(mesh)
    spec = ReceiverGridSpec((-4.75, -4.75, 4.75, 4.75), 0.5, 1.0)  # 20 x 20
    a = evaluate_map(scene, TX, spec, 2)
    b = evaluate_map(scene.with_bvh(False), TX, spec, 2)
    assert a.samples.shape == (20, 20)
    assert a == b


def test_thread_count_does_not_change_map():
    scene = build_scene(box_mesh((2, 2, 0), (3, 5, 2.5)))
    spec = ReceiverGridSpec((-4, -4, 4, 4), 0.5, 1.0)
    ref = write_map(evaluate_map(scene, TX, spec, 2, threads=1))
    for n in (2, 3, 8):
        assert write_map(evaluate_map(scene, TX, spec, 2, threads=n)) == ref


def test_unreachable_nodes_masked():
    g = OccupancyGrid(GridSpec((0, 0, 0), 1.0, (4, 4, 3)))
    g.logodds[2, 2, 1] = np.float32(g.l_max)
    g.flags[2, 2, 1] = 1
    spec = ReceiverGridSpec((0.5, 0.5, 3.5, 3.5), 1.0, 1.5)
    tx = TxConfig((0.5, 0.5, 1.5))
    m = evaluate_map(build_scene(TriangleMesh.empty()), tx, spec, grid=g)
    assert not m.reachable[0, 0]          # transmitter position
    assert not m.reachable[2, 2]          # inside the occupied voxel
    assert np.isnan(m.samples[2, 2]) and m.reachable.sum() == 14


def test_auto_expansion_recorded():
    scene = build_scene(box_mesh((-3, -1, 0), (6, 1, 2)))
    m = evaluate_map(scene, TX, ReceiverGridSpec((0, -0.5, 1, 0.5), 0.5, 1.0), expand=True)
    x0, y0, x1, y1 = m.spec.extent
    assert m.expanded and x0 <= -3 and x1 >= 6 and y0 <= -1 and y1 >= 1


# -- interpolation -----------------------------------------------------------

def test_interpolate_exact_at_nodes():
    rng = np.random.default_rng(0)
    m = field(rng.uniform(-90, -30, size=(4, 5)), spacing=0.5)
    for iy in range(4):
        for ix in range(5):
            assert interpolate(m, (ix * 0.5, iy * 0.5)) == m.samples[iy, ix]


def test_interpolate_constant_field():
    m = field(np.full((2, 2), -63.0))
    assert interpolate(m, (0.5, 0.5)) == pytest.approx(-63.0, abs=1e-12)


def test_interpolate_linear_mean_at_cell_centre():
    m = field([[-40.0, -50.0], [-60.0, -70.0]])
    expect = lin_mean_db([-40, -50, -60, -70])
    assert interpolate(m, (0.5, 0.5)) == pytest.approx(expect, abs=0.01)
    assert expect == pytest.approx(-45.563, abs=1e-3)


def test_interpolate_bounded_by_corners():
    rng = np.random.default_rng(5)
    m = field(rng.uniform(-100, -20, size=(6, 6)))
    for x, y in rng.uniform(0, 5, size=(200, 2)):
        ix, iy = min(int(x), 4), min(int(y), 4)
        c = m.samples[iy:iy + 2, ix:ix + 2]
        assert c.min() - 1e-9 <= interpolate(m, (x, y)) <= c.max() + 1e-9


def test_interpolate_skips_unreachable_corners():
    m = field([[-40.0, np.nan], [-60.0, np.nan]])
    assert interpolate(m, (0.5, 0.5)) == pytest.approx(lin_mean_db([-40, -60]), abs=1e-9)
    m2 = field([[np.nan, np.nan, np.nan], [np.nan, np.nan, -55.0]])
    assert interpolate(m2, (0.2, 0.2)) == -55.0  # nearest valid node


@pytest.mark.parametrize("p", [(-0.1, 0.5), (0.5, 1.2), (5.0, 5.0)])
def test_interpolate_out_of_bounds(p):
    with pytest.raises(OutOfBounds):
        interpolate(field(np.zeros((2, 2))), p)


# -- map differencing --------------------------------------------------------

def test_map_delta():
    rng = np.random.default_rng(2)
    a = field(rng.uniform(-90, -40, size=(5, 5)))
    assert map_delta(a, a) == 0.0
    assert map_delta(field(a.samples + 3.0), a) == pytest.approx(3.0, abs=1e-12)
    b = field(rng.uniform(-90, -40, size=(5, 5)))
    assert map_delta(a, b) == pytest.approx(math.sqrt(np.mean((a.samples - b.samples) ** 2)), abs=1e-12)
    with pytest.raises(SpecMismatch):
        map_delta(a, field(np.zeros((5, 6))))


# -- signal CDF --------------------------------------------------------------

def test_resample_path():
    pts = resample_path([(0, 0), (1, 0), (1, 0.6)], 0.25)
    assert len(pts) == 8  # 0, .25, ..., 1.5 and the end point 1.6
    assert pts[-1].tolist() == [1.0, 0.6]
    assert resample_path([(2, 2), (2, 2)]).tolist() == [[2.0, 2.0]]


def test_cdf_constant_field():
    m = field(np.full((3, 3), -70.0))
    assert signal_cdf(m, [(0, 0), (2, 2)]) == [(-70.0, 1.0)]


def test_cdf_two_valued_field():
    samples = np.array([[-50.0] * 5 + [-80.0] * 5] * 2)
    cdf = signal_cdf(field(samples), [(0, 0), (9, 0)], step=1.0)
    assert cdf == [(-80.0, 0.5), (-50.0, 1.0)]


def test_cdf_sort_oracle():
    rng = np.random.default_rng(9)
    m = field(rng.uniform(-100, -30, size=(8, 8)), spacing=0.5)
    path = rng.uniform(0, 3.5, size=(6, 2))
    cdf = signal_cdf(m, path)
    vals = np.sort([interpolate(m, p) for p in resample_path(path)])
    for v, q in cdf:
        assert q == pytest.approx(np.count_nonzero(vals <= v) / len(vals), abs=1e-12)
    probs = [q for _, q in cdf]
    assert probs == sorted(probs) and probs[-1] == 1.0
    assert cdf_at(cdf, -1000.0) == 0.0 and cdf_at(cdf, 0.0) == 1.0
    assert write_cdf_csv(cdf).startswith("power_dbm,cum_prob\n")


def test_cdf_path_out_of_bounds():
    with pytest.raises(OutOfBounds):
        signal_cdf(field(np.zeros((2, 2))), [(0, 0), (3, 0)])


# -- map files -------------------------------------------------------------

def test_map_file_roundtrip():
    rng = np.random.default_rng(4)
    s = rng.uniform(-120, -20, size=(7, 9))
    s[rng.random(s.shape) < 0.2] = np.nan
    m = field(s, bounds=(-1.5, 2.0, 2.5, 5.0), spacing=0.5)
    data = write_map(m)
    back = read_map(data)
    assert back == m and write_map(back) == data
    with pytest.raises(TruncatedPayload):
        read_map(data[:-3])
