import json
import math

import numpy as np
import pytest

from ndtwin.errors import DegenerateScene, EmptyPathList, InvariantViolation, NonPositiveDistance
from ndtwin.frameio import TriangleMesh
from ndtwin.raytrace import (MaterialModel, PropagationPath, Scene, TxConfig, build_scene, fspl, paths_to_jsonl,
                             power_sum, received_power, trace_paths)

from conftest import box_mesh, quad_mesh

C = 299_792_458.0


def friis(d, f=1.8e9):
    return 20 * math.log10(4 * math.pi * d * f / C)


def random_soup(rng, n, spread=10.0, size=1.0):
    v0 = rng.uniform(-spread, spread, size=(n, 3))
    corners = np.stack([v0, v0 + rng.normal(scale=size, size=(n, 3)), v0 + rng.normal(scale=size, size=(n, 3))], 1)
    return TriangleMesh.from_triangles(corners.reshape(-1, 3), np.arange(3 * n).reshape(n, 3))


def brute_nearest(mesh, o, d, tmin=0.0):
    """Independent Moller-Trumbore with numpy, smallest index on ties."""
    c = mesh.corners()
    e1, e2 = c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = o - c[:, 0]
        u = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1)
        v = (q @ d) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
    ok = (det != 0) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > tmin)
    if not ok.any():
        return -1, math.inf
    t = np.where(ok, t, np.inf)
    i = int(np.argmin(t))
    return i, float(t[i])


# -- free-space loss and aggregation -----------------------------------------

def test_fspl_unit_distance():
    f = 1.8e9
    assert fspl(C / (4 * math.pi * f), f) == pytest.approx(0.0, abs=1e-9)


def test_fspl_ten_metres():
    assert fspl(10.0, 1.8e9) == pytest.approx(57.55, abs=0.01)


@pytest.mark.parametrize("f", [9e8, 1.8e9, 3.5e9, 2.8e10])
def test_fspl_doubling(f):
    assert fspl(14.0, f) - fspl(7.0, f) == pytest.approx(20 * math.log10(2), abs=1e-9)


@pytest.mark.parametrize("d", [0.0, -1.0])
def test_fspl_nonpositive(d):
    with pytest.raises(NonPositiveDistance):
        fspl(d, 1e9)


def test_power_sum_cases():
    assert power_sum([-50.0]) == pytest.approx(-50.0, abs=1e-12)
    assert power_sum([-50.0, -50.0]) == pytest.approx(-46.9897, abs=1e-4)
    with pytest.raises(EmptyPathList):
        received_power([])


def test_power_sum_linear_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = rng.uniform(-120, 0, size=rng.integers(1, 30))
        expect = 10 * math.log10(sum(10 ** (x / 10) for x in p))
        assert power_sum(p) == pytest.approx(expect, abs=1e-9)
        assert power_sum(p[::-1]) == power_sum(p)


# -- paths -------------------------------------------------------------------

def test_empty_scene_single_direct_path():
    scene = build_scene(TriangleMesh.empty())
    paths = trace_paths(scene, TxConfig((0, 0, 2)), (3, 4, 2), max_order=2)
    assert len(paths) == 1
    p = paths[0]
    assert (p.bounces, p.penetrations) == (0, 0)
    assert p.length == pytest.approx(5.0, abs=1e-12)
    assert p.power == pytest.approx(43 - friis(5.0), abs=1e-9)


def test_wall_penetration():
    wall = quad_mesh([(5, -50, -50), (5, 50, -50), (5, 50, 50), (5, -50, 50)])
    scene = build_scene(wall)
    tx = TxConfig((0, 0, 1))
    (p,) = trace_paths(scene, tx, (10, 0, 1), max_order=0)
    assert p.penetrations == 1
    assert p.power == pytest.approx(43 - friis(10.0) - 10.0, abs=1e-9)


def test_two_ray_ground():
    ground = quad_mesh([(-100, -100, 0), (100, -100, 0), (100, 100, 0), (-100, 100, 0)])
    ht, hr, d = 3.0, 1.5, 20.0
    paths = trace_paths(build_scene(ground), TxConfig((0, 0, ht)), (d, 0, hr), max_order=1)
    assert [p.bounces for p in paths] == [0, 1]
    refl = paths[1]
    closed = math.sqrt((ht + hr) ** 2 + d ** 2)
    assert refl.length == pytest.approx(closed, abs=1e-6)
    assert refl.power == pytest.approx(43 - friis(closed) - 6.0, abs=0.01)
    # specular point splits d in the ratio ht : hr
    assert refl.vertices[1] == pytest.approx([d * ht / (ht + hr), 0, 0], abs=1e-9)


def test_no_reflection_from_back_side():
    ground = quad_mesh([(-100, -100, 0), (100, -100, 0), (100, 100, 0), (-100, 100, 0)])
    paths = trace_paths(build_scene(ground), TxConfig((0, 0, -3)), (10, 0, -1), max_order=1)
    assert [p.bounces for p in paths] == [0]


def test_closed_box_counts_two_crossings():
    scene = build_scene(box_mesh((4, -1, -1), (5, 1, 1)))
    (p,) = trace_paths(scene, TxConfig((0, 0, 0.1)), (9, 0.2, 0.1), max_order=0)
    assert p.penetrations == 2


def test_shared_edge_counts_once():
    # ray passes exactly through the diagonal shared by the quad's two triangles
    scene = build_scene(quad_mesh([(5, -1, -1), (5, 1, -1), (5, 1, 1), (5, -1, 1)]))
    assert scene.crossings((0, 0, 0), (10, 0, 0)) == 1


def room_scene():
    # open-top box room seen from inside: floor and four walls facing inward
    return build_scene(TriangleMesh(
        np.vstack([box_mesh((0, 0, 0), (8, 6, 3)).vertices]),
        box_mesh((0, 0, 0), (8, 6, 3)).triangles[:, ::-1],
        -box_mesh((0, 0, 0), (8, 6, 3)).normals))


def test_path_invariants_in_room():
    scene = room_scene()
    tx = TxConfig((2, 2, 2), power=30, tx_gain=2, rx_gain=1)
    mats = MaterialModel(5.0, 12.0)
    paths = trace_paths(scene, tx, (6.5, 4.0, 1.0), max_order=2, materials=mats)
    assert len(paths) > 1
    for p in paths:
        seg = np.linalg.norm(np.diff(p.vertices, axis=0), axis=1).sum()
        assert p.length == pytest.approx(seg, abs=1e-9)
        expect = 30 + 2 + 1 - friis(p.length) - 5 * p.bounces - 12 * p.penetrations
        assert p.power == pytest.approx(expect, abs=1e-9)
        if p.bounces or p.penetrations:
            assert p.power < 33 - friis(p.length)
    # first-order paths: one per wall, floor and ceiling of the closed box
    assert sum(p.bounces == 1 for p in paths) == 6
    keys = {tuple(np.round(p.vertices.ravel(), 9)) for p in paths}
    assert len(keys) == len(paths)


def test_reciprocity():
    scene = room_scene()
    a, b = (1.5, 2.0, 2.2), (6.0, 4.5, 0.8)
    fwd = trace_paths(scene, TxConfig(a), b, max_order=2)
    rev = trace_paths(scene, TxConfig(b), a, max_order=2)
    assert sorted(round(p.length, 9) for p in fwd) == sorted(round(p.length, 9) for p in rev)
    assert received_power(fwd) == pytest.approx(received_power(rev), abs=1e-9)


def test_bvh_transparency_on_paths():
    scene = room_scene()
    brute = scene.with_bvh(False)
    for rx in [(6.5, 4.0, 1.0), (1.0, 5.0, 2.5), (7.9, 0.1, 0.5)]:
        a = trace_paths(scene, TxConfig((2, 2, 2)), rx, 2)
        b = trace_paths(brute, TxConfig((2, 2, 2)), rx, 2)
        assert [(p.length, p.bounces, p.penetrations, p.power) for p in a] == \
               [(p.length, p.bounces, p.penetrations, p.power) for p in b]


def test_trace_errors():
    scene = build_scene(TriangleMesh.empty())
    with pytest.raises(InvariantViolation):
        trace_paths(scene, TxConfig((0, 0, 0)), (1, 0, 0), max_order=4)
    with pytest.raises(NonPositiveDistance):
        trace_paths(scene, TxConfig((0, 0, 0)), (0, 0, 0))
    with pytest.raises(DegenerateScene):
        trace_paths(scene, TxConfig((0, 0, 0)), (np.nan, 0, 0))
    with pytest.raises(InvariantViolation):
        TxConfig((0, 0, 0), frequency=0)


def test_paths_jsonl():
    paths = trace_paths(room_scene(), TxConfig((2, 2, 2)), (6, 4, 1), 1)
    lines = paths_to_jsonl((6, 4, 1), paths).splitlines()
    assert len(lines) == len(paths)
    rec = json.loads(lines[0])
    assert rec["rx"] == [6.0, 4.0, 1.0] and rec["bounces"] == 0
    assert isinstance(paths[0], PropagationPath)


# -- intersection ------------------------------------------------------------

def test_empty_scene_misses():
    scene = build_scene(TriangleMesh.empty())
    assert scene.intersect((0, 0, 0), (1, 0, 0)) == (-1, math.inf)


def test_single_triangle_centroid_hit():
    tri = TriangleMesh.from_triangles([[0, 0, 5], [3, 0, 5], [0, 3, 5]], [[0, 1, 2]])
    idx, t = build_scene(tri).intersect((1, 1, 0), (0, 0, 1))
    assert idx == 0 and t == pytest.approx(5.0, abs=1e-12)


def test_duplicate_triangles_tie_to_lowest_index():
    v = [[0, 0, 5], [3, 0, 5], [0, 3, 5]]
    mesh = TriangleMesh.from_triangles(v * 3, [[3, 4, 5], [0, 1, 2], [6, 7, 8]])
    scene = build_scene(mesh)
    assert scene.intersect((1, 1, 0), (0, 0, 1))[0] == 0
    assert scene.with_bvh(False).intersect((1, 1, 0), (0, 0, 1))[0] == 0


def test_bvh_matches_brute_force_small():
    rng = np.random.default_rng(11)
    mesh = random_soup(rng, 2000)
    scene = Scene(mesh)
    brute = scene.with_bvh(False)
    o = rng.uniform(-12, 12, size=(300, 3))
    d = rng.normal(size=(300, 3))
    ib, tb = scene.intersect_many(o, d)
    ir, tr = brute.intersect_many(o, d)
    np.testing.assert_array_equal(ib, ir)
    np.testing.assert_array_equal(tb, tr)
    for k in range(0, 300, 10):
        i, t = brute_nearest(mesh, o[k], d[k])
        assert ib[k] == i
        if i >= 0:
            assert tb[k] == pytest.approx(t, rel=1e-9)
