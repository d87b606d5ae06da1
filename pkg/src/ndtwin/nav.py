"""8-connected grid planners: shortest path and radio-aware path.

Step costs are kept as integers (nano-metres times the radio weight) so equal
costs compare equal exactly and the expansion order, and hence the returned
path, never depends on floating-point summation order.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BlockedEndpoint, InvariantViolation, Unreachable
from .occmap import OccupancyGrid
from .radiomap import RadioMap, interpolate

SQRT2 = math.sqrt(2.0)
COST_SCALE = 1_000_000_000
ALPHA = 0.5
P_WINDOW = (-100.0, -40.0)

# (dx, dy) in a fixed order
_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass(eq=False)
class NavGrid:
    origin: tuple[float, float]  # lower-left corner of cell (0, 0)
    resolution: float
    free: np.ndarray             # (ny, nx) bool

    def __post_init__(self):
        self.free = np.asarray(self.free, dtype=bool)
        if self.free.ndim != 2:
            raise InvariantViolation("free mask must be 2-D")
        if not self.resolution > 0:
            raise InvariantViolation("resolution must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.free.shape

    @classmethod
    def from_occupancy(cls, grid: OccupancyGrid, z_lo: float, z_hi: float | None = None,
                       inflate: int = 1) -> "NavGrid":
        """Cells blocked where an occupied voxel overlaps ``[z_lo, z_hi]``, grown by ``inflate`` cells."""
        blocked = grid.occupied_slice(z_lo, z_lo if z_hi is None else z_hi).T
        if inflate > 0 and blocked.any():
            blocked = ndimage.binary_dilation(blocked, structure=np.ones((3, 3), bool), iterations=inflate)
        spec = grid.spec
        return cls((spec.origin[0], spec.origin[1]), spec.voxel_size, ~blocked)

    def cell_of(self, point) -> tuple[int, int]:
        ix = int(math.floor((float(point[0]) - self.origin[0]) / self.resolution))
        iy = int(math.floor((float(point[1]) - self.origin[1]) / self.resolution))
        return iy, ix

    def center(self, iy: int, ix: int) -> tuple[float, float]:
        return (self.origin[0] + (ix + 0.5) * self.resolution, self.origin[1] + (iy + 0.5) * self.resolution)

    def centers(self) -> np.ndarray:
        ny, nx = self.shape
        gx, gy = np.meshgrid(np.arange(nx), np.arange(ny))
        return np.column_stack([self.origin[0] + (gx.ravel() + 0.5) * self.resolution,
                                self.origin[1] + (gy.ravel() + 0.5) * self.resolution])

    def is_free(self, iy: int, ix: int) -> bool:
        ny, nx = self.shape
        return 0 <= iy < ny and 0 <= ix < nx and bool(self.free[iy, ix])


@dataclass(eq=False)
class PlannedPath:
    waypoints: np.ndarray  # (N, 2) cell centres
    cells: list[tuple[int, int]]
    length: float
    cost: int              # scaled integer objective
    min_power: float = float("nan")
    mean_power: float = float("nan")

    def summary(self) -> dict:
        return {"length": self.length, "cost": self.cost, "min_power": _num(self.min_power),
                "mean_power": _num(self.mean_power), "waypoints": len(self.waypoints)}

    def to_csv(self) -> str:
        return "x,y\n" + "".join(f"{float(x)!r},{float(y)!r}\n" for x, y in self.waypoints)


def _num(v: float):
    return None if math.isnan(v) else v


def step_costs(resolution: float, weight: float) -> tuple[int, int]:
    """Integer (straight, diagonal) step costs for a uniform weight."""
    return (int(round(resolution * weight * COST_SCALE)), int(round(resolution * SQRT2 * weight * COST_SCALE)))


def radio_penalty(grid: NavGrid, rmap: RadioMap, p_window: tuple[float, float] = P_WINDOW) -> np.ndarray:
    """q in [0, 1] per cell from power interpolated at cell centres (clamped into the map)."""
    p_min, p_max = p_window
    if not p_min < p_max:
        raise InvariantViolation("p_min must be below p_max")
    x0, y0, x1, y1 = rmap.spec.extent
    q = np.ones(grid.shape)
    ny, nx = grid.shape
    for iy in range(ny):
        for ix in range(nx):
            if not grid.free[iy, ix]:
                continue
            cx, cy = grid.center(iy, ix)
            p = interpolate(rmap, (min(max(cx, x0), x1), min(max(cy, y0), y1)))
            q[iy, ix] = min(max((p_max - p) / (p_max - p_min), 0.0), 1.0)
    return q


def _astar(grid: NavGrid, start, goal, alpha: float, q: np.ndarray | None) -> PlannedPath:
    s = grid.cell_of(start)
    g = grid.cell_of(goal)
    for name, c in (("start", s), ("goal", g)):
        if not grid.is_free(*c):
            raise BlockedEndpoint(f"{name} cell {c} is blocked or outside the grid")
    ny, nx = grid.shape
    res = grid.resolution
    lengths = (res, res * SQRT2)
    if q is None:
        hfac = 1.0
    else:
        hfac = alpha + (1.0 - alpha) * float(q[grid.free].min())
    h_s, h_d = (int(round(lengths[0] * hfac * COST_SCALE)), int(round(lengths[1] * hfac * COST_SCALE)))
    gy, gx = g

    def h(iy, ix):
        a, b = abs(ix - gx), abs(iy - gy)
        lo_, hi_ = (a, b) if a < b else (b, a)
        return (hi_ - lo_) * h_s + lo_ * h_d

    free = grid.free
    start_id = s[0] * nx + s[1]
    goal_id = g[0] * nx + g[1]
    best = {start_id: 0}
    parent = {start_id: -1}
    closed = set()
    heap = [(h(*s), start_id, 0)]
    while heap:
        f, cid, gc = heapq.heappop(heap)
        if cid in closed or gc != best[cid]:
            continue
        closed.add(cid)
        if cid == goal_id:
            break
        iy, ix = divmod(cid, nx)
        for dx, dy in _MOVES:
            jx, jy = ix + dx, iy + dy
            if not (0 <= jx < nx and 0 <= jy < ny) or not free[jy, jx]:
                continue
            diag = dx != 0 and dy != 0
            if diag and not (free[iy, jx] and free[jy, ix]):
                continue  # no corner cutting
            nid = jy * nx + jx
            if nid in closed:
                continue
            w = 1.0 if q is None else alpha + (1.0 - alpha) * (q[iy, ix] + q[jy, jx]) / 2.0
            step = int(round(lengths[diag] * w * COST_SCALE))
            ng = gc + step
            if ng < best.get(nid, ng + 1):
                best[nid] = ng
                parent[nid] = cid
                heapq.heappush(heap, (ng + h(jy, jx), nid, ng))
    if goal_id not in closed:
        raise Unreachable(f"no path from {s} to {g}")
    ids = [goal_id]
    while parent[ids[-1]] >= 0:
        ids.append(parent[ids[-1]])
    ids.reverse()
    cells = [divmod(i, nx) for i in ids]
    n_diag = sum(1 for a, b in zip(cells, cells[1:]) if a[0] != b[0] and a[1] != b[1])
    n_straight = len(cells) - 1 - n_diag
    wp = np.array([grid.center(*c) for c in cells])
    return PlannedPath(wp, cells, n_straight * res + n_diag * res * SQRT2, best[goal_id])


def annotate_power(path: PlannedPath, rmap: RadioMap) -> PlannedPath:
    x0, y0, x1, y1 = rmap.spec.extent
    p = np.array([interpolate(rmap, (min(max(x, x0), x1), min(max(y, y0), y1))) for x, y in path.waypoints])
    path.min_power = float(p.min())
    path.mean_power = float(p.mean())
    return path


def plan_shortest(grid: NavGrid, start, goal, rmap: RadioMap | None = None) -> PlannedPath:
    path = _astar(grid, start, goal, 1.0, None)
    return annotate_power(path, rmap) if rmap is not None else path


def plan_radio_aware(grid: NavGrid, rmap: RadioMap, start, goal, alpha: float = ALPHA,
                     p_window: tuple[float, float] = P_WINDOW) -> PlannedPath:
    """Minimise sum of step_length * (alpha + (1 - alpha) * q) with q averaged over the step's two cells."""
    if not 0.0 <= alpha <= 1.0:
        raise InvariantViolation("alpha must be in [0, 1]")
    q = radio_penalty(grid, rmap, p_window)
    return annotate_power(_astar(grid, start, goal, alpha, q), rmap)


def path_summary_json(path: PlannedPath, extra: dict | None = None) -> str:
    return json.dumps({**path.summary(), **(extra or {})}, sort_keys=True, indent=2) + "\n"
