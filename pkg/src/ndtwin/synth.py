"""Synthetic box worlds, a simulated spinning LiDAR, and the reference scenes used in tests.

Scene coordinates are chosen so that wall surfaces and receiver nodes fall on voxel
centres of the default 0.25 m grid (origin offset by half a voxel), which keeps
rasterisation unambiguous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frameio import PointFrame, Pose
from .occmap import OBSERVED, GridSpec, OccupancyGrid

Box = tuple[tuple[float, float, float], tuple[float, float, float]]


def ray_boxes(origin: np.ndarray, dirs: np.ndarray, boxes: list[Box], max_range: float) -> np.ndarray:
    """Distance to the nearest box along each unit ray (inf when nothing within ``max_range``)."""
    lo = np.array([b[0] for b in boxes], dtype=np.float64)  # (B, 3)
    hi = np.array([b[1] for b in boxes], dtype=np.float64)
    d = np.where(dirs == 0.0, 1e-12, dirs)
    inv = 1.0 / d  # (R, 3)
    t1 = (lo[None] - origin[None, None]) * inv[:, None]
    t2 = (hi[None] - origin[None, None]) * inv[:, None]
    tnear = np.minimum(t1, t2).max(axis=2)
    tfar = np.maximum(t1, t2).min(axis=2)
    hit = (tnear <= tfar) & (tnear > 1e-9)
    t = np.where(hit, tnear, np.inf).min(axis=1)
    t[t > max_range] = np.inf
    return t


@dataclass(frozen=True)
class Lidar:
    """Spinning multi-beam LiDAR (defaults follow a 16-channel, 30 degree vertical unit)."""

    channels: int = 16
    vertical_fov_deg: float = 30.0
    horizontal_res_deg: float = 2.0
    max_range: float = 20.0

    def directions(self) -> np.ndarray:
        az = np.deg2rad(np.arange(0.0, 360.0, self.horizontal_res_deg))
        half = self.vertical_fov_deg / 2.0
        el = np.deg2rad(np.linspace(-half, half, self.channels))
        a, e = np.meshgrid(az, el)
        return np.column_stack([(np.cos(e) * np.cos(a)).ravel(), (np.cos(e) * np.sin(a)).ravel(), np.sin(e).ravel()])

    def scan(self, boxes: list[Box], pose: Pose, stamp: float = 0.0) -> PointFrame:
        """Returns sensor-frame points; beams without a return are dropped."""
        rot = pose.rotation_matrix()
        origin = np.asarray(pose.translation, dtype=np.float64)
        local = self.directions()
        world_dirs = local @ rot.T
        t = ray_boxes(origin, world_dirs, boxes, self.max_range)
        ok = np.isfinite(t)
        pts = local[ok] * t[ok, None]
        intensity = np.full((len(pts), 1), 100.0)
        return PointFrame.from_points(np.hstack([pts, intensity]), pose=pose, stamp=stamp)


def rasterize(grid: OccupancyGrid, boxes: list[Box]) -> OccupancyGrid:
    """Mark every voxel whose centre lies in a box (closed) as observed and fully occupied."""
    spec = grid.spec
    idx = np.indices(spec.dims).reshape(3, -1).T
    centers = spec.center(idx)
    inside = np.zeros(len(idx), bool)
    for lo, hi in boxes:
        inside |= np.all((centers >= np.asarray(lo) - 1e-9) & (centers <= np.asarray(hi) + 1e-9), axis=1)
    out = grid.copy()
    lo_ = out.logodds.reshape(-1)
    fl = out.flags.reshape(-1)
    lo_[inside] = np.float32(out.l_max)
    fl[inside] = OBSERVED
    return out


def waypoint_poses(points, z: float, step: float) -> list[Pose]:
    """Poses every ``step`` metres along a polyline, heading along the motion."""
    pts = np.asarray(points, dtype=np.float64)
    poses = []
    for a, b in zip(pts[:-1], pts[1:]):
        seg = b - a
        n = max(1, int(math.ceil(np.linalg.norm(seg) / step)))
        yaw = math.atan2(seg[1], seg[0])
        for k in range(n):
            p = a + seg * (k / n)
            poses.append(Pose.from_yaw(p[0], p[1], z, yaw))
    end = pts[-1] - pts[-2]
    poses.append(Pose.from_yaw(pts[-1][0], pts[-1][1], z, math.atan2(end[1], end[0])))
    return poses


# --------------------------------------------------------------------------
# reference scenes
# --------------------------------------------------------------------------

ROOM_GRID = GridSpec((-2.125, -2.125, -0.375), 0.25, (56, 48, 14))
ROOM_TX = (-10.0, 4.0, 2.0)
ROOM_RX_BOUNDS = (0.5, 0.5, 9.5, 7.5)


def room_boxes() -> list[Box]:
    """10 m x 8 m room, west-wall window, partition with a north doorway, one cabinet."""
    h = 2.5
    return [
        ((-0.5, -0.5, -0.25), (10.5, 8.5, 0.0)),   # floor slab
        ((-0.25, -0.25, 0.0), (0.0, 3.0, h)),      # west wall, south of window
        ((-0.25, 5.0, 0.0), (0.0, 8.25, h)),       # west wall, north of window
        ((-0.25, 3.0, 0.0), (0.0, 5.0, 0.75)),     # window sill
        ((-0.25, 3.0, 1.75), (0.0, 5.0, h)),       # window lintel
        ((10.0, -0.25, 0.0), (10.25, 8.25, h)),    # east wall
        ((-0.25, -0.25, 0.0), (10.25, 0.0, h)),    # south wall
        ((-0.25, 8.0, 0.0), (10.25, 8.25, h)),     # north wall
        ((4.75, 0.0, 0.0), (5.25, 5.0, h)),        # partition, doorway at y > 5
        ((7.0, 6.0, 0.0), (8.0, 7.0, 1.5)),        # cabinet
    ]


ROOM_ROUTE = [(2.0, 1.5), (2.0, 6.5), (4.0, 6.5), (6.5, 6.5), (8.5, 4.0), (8.5, 1.5)]


def room_trace(step: float = 0.75, lidar: Lidar | None = None) -> list[PointFrame]:
    lidar = lidar or Lidar()
    boxes = room_boxes()
    return [lidar.scan(boxes, pose, stamp=float(i)) for i, pose in enumerate(waypoint_poses(ROOM_ROUTE, 0.5, step))]


WINDOW_GRID = GridSpec((-1.125, -1.125, -0.375), 0.25, (57, 41, 14))
WINDOW_TX = (6.0, 18.0, 2.0)
WINDOW_RX_BOUNDS = (0.0, 0.0, 12.0, 8.0)
WINDOW_START = (1.0, 2.75)
WINDOW_GOAL = (11.0, 2.75)


def window_boxes() -> list[Box]:
    """12 m x 8 m hall lit through a north window; three shelf rows shade the south aisle."""
    h = 2.5
    return [
        ((0.0, 0.0, 0.0), (12.0, 8.0, 0.0)),     # floor layer
        ((0.0, 0.0, 0.0), (0.0, 8.0, h)),        # west wall
        ((12.0, 0.0, 0.0), (12.0, 8.0, h)),      # east wall
        ((0.0, 0.0, 0.0), (12.0, 0.0, h)),       # south wall
        ((0.0, 8.0, 0.0), (4.0, 8.0, h)),        # north wall, west of window
        ((8.0, 8.0, 0.0), (12.0, 8.0, h)),       # north wall, east of window
        ((4.0, 8.0, 0.0), (8.0, 8.0, 0.5)),      # sill
        ((4.0, 8.0, 2.0), (8.0, 8.0, h)),        # lintel
        ((3.0, 2.5, 0.0), (9.0, 2.5, 2.0)),      # shelf rows
        ((3.0, 3.0, 0.0), (9.0, 3.0, 2.0)),
        ((3.0, 3.5, 0.0), (9.0, 3.5, 2.0)),
    ]


def window_grid() -> OccupancyGrid:
    return rasterize(OccupancyGrid(WINDOW_GRID), window_boxes())
