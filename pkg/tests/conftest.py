import math

import numpy as np
import pytest

from ndtwin import nav, occmap, pipeline, radiomap, raytrace, synth
from ndtwin.frameio import TriangleMesh


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Axis-aligned box, 12 triangles with outward normals."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]], dtype=float)
    t = [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
         [2, 3, 7], [2, 7, 6], [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3]]
    return TriangleMesh.from_triangles(v, t)


def quad_mesh(corners) -> TriangleMesh:
    """Two triangles spanning four corners given counter-clockwise around the normal."""
    return TriangleMesh.from_triangles(np.asarray(corners, dtype=float), [[0, 1, 2], [0, 2, 3]])


def room_config(**kw) -> pipeline.PipelineConfig:
    g = synth.ROOM_GRID
    return pipeline.PipelineConfig(voxel_size=g.voxel_size, grid_origin=g.origin, grid_dims=g.dims,
                                   rx_bounds=synth.ROOM_RX_BOUNDS, tx_position=synth.ROOM_TX, **kw)


@pytest.fixture(scope="session")
def room_frames():
    return synth.room_trace()


@pytest.fixture(scope="session")
def window_scene():
    """Rasterized window hall: (grid, scene, map, nav grid)."""
    grid = synth.window_grid()
    scene = raytrace.build_scene(occmap.extract_mesh(grid))
    spec = radiomap.ReceiverGridSpec(synth.WINDOW_RX_BOUNDS, 0.5, 1.0)
    rmap = radiomap.evaluate_map(scene, raytrace.TxConfig(synth.WINDOW_TX), spec, 2, grid=grid)
    ng = nav.NavGrid.from_occupancy(grid, 0.25, 1.0)
    return grid, scene, rmap, ng


def dijkstra_cost(free: np.ndarray, start, goal, resolution=1.0, q=None, alpha=1.0, scale=1_000_000_000):
    """Integer optimal cost by scipy's Dijkstra over an explicit 8-connected graph.

    Start/goal are (iy, ix). Diagonal moves need both side cells free. Step
    weights mirror the planner's documented integer rounding. Returns None when
    the goal is unreachable.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    ny, nx = free.shape
    rows, cols, w = [], [], []
    for iy in range(ny):
        for ix in range(nx):
            if not free[iy, ix]:
                continue
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    if dx == dy == 0:
                        continue
                    jx, jy = ix + dx, iy + dy
                    if not (0 <= jx < nx and 0 <= jy < ny) or not free[jy, jx]:
                        continue
                    diag = dx != 0 and dy != 0
                    if diag and not (free[iy, jx] and free[jy, ix]):
                        continue
                    length = resolution * (math.sqrt(2.0) if diag else 1.0)
                    k = 1.0 if q is None else alpha + (1.0 - alpha) * (q[iy, ix] + q[jy, jx]) / 2.0
                    rows.append(iy * nx + ix)
                    cols.append(jy * nx + jx)
                    w.append(int(round(length * k * scale)))
    if start == goal:
        return 0
    # csgraph drops explicit zero weights; every step here is strictly positive
    g = coo_matrix((np.array(w, dtype=np.float64), (rows, cols)), shape=(nx * ny, nx * ny)).tocsr()
    d = dijkstra(g, indices=start[0] * nx + start[1])[goal[0] * nx + goal[1]]
    return None if not np.isfinite(d) else int(d)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
