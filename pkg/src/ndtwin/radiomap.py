"""Receiver-grid radio maps: evaluation, interpolation, differencing and signal CDFs."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvariantViolation, MalformedHeader, OutOfBounds, SpecMismatch, TruncatedPayload
from .frameio import dump_header, split_header
from .occmap import OccupancyGrid
from .raytrace import MaterialModel, Scene, TxConfig, _Tracer

MAP_FORMAT = "ndtwin-radiomap"
CDF_STEP = 0.25
_BOUND_TOL = 1e-9


@dataclass(frozen=True)
class ReceiverGridSpec:
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    spacing: float = 0.5
    height: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(v) for v in self.bounds))
        xmin, ymin, xmax, ymax = self.bounds
        if not self.spacing > 0:
            raise InvariantViolation("receiver spacing must be positive")
        if not (xmax > xmin and ymax > ymin):
            raise InvariantViolation("receiver bounds are degenerate")
        if not all(math.isfinite(v) for v in (*self.bounds, self.spacing, self.height)):
            raise InvariantViolation("receiver grid values must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        """(ny, nx) node counts; nodes sit at ``min + i * spacing`` up to the max bound."""
        xmin, ymin, xmax, ymax = self.bounds
        nx = int(math.floor((xmax - xmin) / self.spacing + 1e-9)) + 1
        ny = int(math.floor((ymax - ymin) / self.spacing + 1e-9)) + 1
        return ny, nx

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ny, nx = self.shape
        xmin, ymin = self.bounds[0], self.bounds[1]
        return xmin, ymin, xmin + (nx - 1) * self.spacing, ymin + (ny - 1) * self.spacing

    def xs(self) -> np.ndarray:
        return self.bounds[0] + np.arange(self.shape[1]) * self.spacing

    def ys(self) -> np.ndarray:
        return self.bounds[1] + np.arange(self.shape[0]) * self.spacing

    def nodes(self) -> np.ndarray:
        """(ny * nx, 3) receiver positions in row-major (y, x) order."""
        gx, gy = np.meshgrid(self.xs(), self.ys())
        return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, self.height)])

    def expanded_to(self, lo_xy, hi_xy) -> "ReceiverGridSpec":
        """Grow the bounds in whole spacing steps until they cover ``[lo_xy, hi_xy]``."""
        xmin, ymin, xmax, ymax = self.bounds
        s = self.spacing
        if lo_xy[0] < xmin:
            xmin -= math.ceil((xmin - lo_xy[0]) / s - 1e-9) * s
        if lo_xy[1] < ymin:
            ymin -= math.ceil((ymin - lo_xy[1]) / s - 1e-9) * s
        x_end, y_end = self.extent[2], self.extent[3]
        if hi_xy[0] > x_end:
            xmax = x_end + math.ceil((hi_xy[0] - x_end) / s - 1e-9) * s
        if hi_xy[1] > y_end:
            ymax = y_end + math.ceil((hi_xy[1] - y_end) / s - 1e-9) * s
        return replace(self, bounds=(xmin, ymin, xmax, ymax))

    def to_json(self) -> dict:
        return {"bounds": list(self.bounds), "spacing": self.spacing, "height": self.height}


@dataclass(eq=False)
class RadioMap:
    spec: ReceiverGridSpec
    samples: np.ndarray    # (ny, nx) dBm, NaN where unreachable
    reachable: np.ndarray  # (ny, nx) bool
    tx: TxConfig
    expanded: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(self.spec.shape)
        self.reachable = np.asarray(self.reachable, dtype=bool).reshape(self.spec.shape)
        if not np.all(np.isfinite(self.samples[self.reachable])):
            raise InvariantViolation("reachable samples must be finite")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RadioMap):
            return NotImplemented
        return (self.spec == other.spec and self.tx == other.tx and self.expanded == other.expanded
                and np.array_equal(self.reachable, other.reachable)
                and np.array_equal(self.samples.view(np.uint64), other.samples.view(np.uint64)))


def evaluate_map(
    scene: Scene,
    tx: TxConfig,
    spec: ReceiverGridSpec,
    max_order: int = 2,
    materials: MaterialModel | None = None,
    grid: OccupancyGrid | None = None,
    threads: int = 1,
    expand: bool = False,
) -> RadioMap:
    """Trace every receiver node.

    Nodes inside occupied voxels of ``grid`` (or on the transmitter) are marked
    unreachable. With ``expand`` the bounds grow to cover the mesh footprint.
    """
    materials = materials or MaterialModel()
    expanded = False
    if expand and len(scene.mesh.vertices):
        lo = scene.mesh.vertices[:, :2].min(axis=0)
        hi = scene.mesh.vertices[:, :2].max(axis=0)
        grown = spec.expanded_to(lo, hi)
        expanded = grown != spec
        spec = grown
    tracer = _Tracer(scene, tx, max_order)
    nodes = spec.nodes()
    reachable = np.ones(len(nodes), bool)
    if grid is not None:
        reachable &= ~grid.occupied_at(nodes)
    reachable &= np.any(nodes != np.asarray(tx.position), axis=1)
    todo = np.flatnonzero(reachable)
    samples = np.full(len(nodes), np.nan)

    def run(chunk):
        for i in chunk:
            samples[i] = tracer.power_at(nodes[i], materials)

    threads = max(1, int(threads))
    if threads == 1 or len(todo) < 2:
        run(todo)
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, np.array_split(todo, threads)))
    return RadioMap(spec, samples.reshape(spec.shape), reachable.reshape(spec.shape), tx, expanded)


def _nearest_valid(rmap: RadioMap, x: float, y: float) -> float:
    iy, ix = np.nonzero(rmap.reachable)
    if len(ix) == 0:
        raise OutOfBounds("radio map has no reachable nodes")
    d2 = (rmap.spec.xs()[ix] - x) ** 2 + (rmap.spec.ys()[iy] - y) ** 2
    k = int(np.argmin(d2))
    return float(rmap.samples[iy[k], ix[k]])


def interpolate(rmap: RadioMap, point) -> float:
    """Bilinear interpolation of linear power over the enclosing cell, returned in dBm."""
    x, y = float(point[0]), float(point[1])
    x0, y0, x1, y1 = rmap.spec.extent
    if not (x0 - _BOUND_TOL <= x <= x1 + _BOUND_TOL and y0 - _BOUND_TOL <= y <= y1 + _BOUND_TOL):
        raise OutOfBounds(f"({x}, {y}) lies outside the radio map")
    ny, nx = rmap.spec.shape
    s = rmap.spec.spacing
    fx = min(max((x - x0) / s, 0.0), nx - 1.0)
    fy = min(max((y - y0) / s, 0.0), ny - 1.0)
    ix = min(int(math.floor(fx)), max(nx - 2, 0))
    iy = min(int(math.floor(fy)), max(ny - 2, 0))
    tx_, ty_ = fx - ix, fy - iy
    corners = []
    for dy, wy in ((0, 1.0 - ty_), (1, ty_)):
        for dx, wx in ((0, 1.0 - tx_), (1, tx_)):
            w = wx * wy
            jx, jy = ix + dx, iy + dy
            if w > 0.0 and jx < nx and jy < ny and rmap.reachable[jy, jx]:
                corners.append((w, rmap.samples[jy, jx]))
    if not corners:
        return _nearest_valid(rmap, x, y)
    if len(corners) == 1:
        return float(corners[0][1])
    wsum = math.fsum(w for w, _ in corners)
    lin = math.fsum(w * 10.0 ** (p / 10.0) for w, p in corners) / wsum
    return 10.0 * math.log10(lin)


def interpolate_many(rmap: RadioMap, points) -> np.ndarray:
    return np.array([interpolate(rmap, p) for p in np.asarray(points, dtype=np.float64).reshape(-1, 2)])


def map_delta(a: RadioMap, b: RadioMap) -> float:
    """RMS difference in dB over nodes reachable in both maps."""
    if a.spec != b.spec:
        raise SpecMismatch("radio maps have different receiver grids")
    both = a.reachable & b.reachable
    if not both.any():
        return 0.0
    d = a.samples[both] - b.samples[both]
    return float(np.sqrt(np.mean(d * d)))


def resample_path(path, step: float = CDF_STEP) -> np.ndarray:
    """Points every ``step`` metres of arc length, plus the final point."""
    pts = np.asarray(path, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise InvariantViolation("path has no points")
    if not step > 0:
        raise InvariantViolation("resampling step must be positive")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0.0:
        return pts[:1].copy()
    s = np.arange(int(math.floor(total / step + 1e-9)) + 1) * step
    if total - s[-1] > 1e-9:
        s = np.append(s, total)
    return np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])


def signal_cdf(rmap: RadioMap, path, step: float = CDF_STEP) -> list[tuple[float, float]]:
    """Empirical CDF of interpolated power along ``path``: (power_dbm, P[X <= power])."""
    values = np.sort(interpolate_many(rmap, resample_path(path, step)))
    n = len(values)
    uniq, counts = np.unique(values, return_counts=True)
    cum = np.cumsum(counts)
    return [(float(v), float(c) / n) for v, c in zip(uniq, cum)]


def cdf_at(cdf: list[tuple[float, float]], x: float) -> float:
    """Evaluate a step CDF from :func:`signal_cdf` at ``x``."""
    p = 0.0
    for v, q in cdf:
        if v <= x:
            p = q
        else:
            break
    return p


def cdf_median(cdf: list[tuple[float, float]]) -> float:
    for v, q in cdf:
        if q >= 0.5:
            return v
    return cdf[-1][0]


def write_cdf_csv(cdf: list[tuple[float, float]]) -> str:
    return "power_dbm,cum_prob\n" + "".join(f"{v!r},{q!r}\n" for v, q in cdf)


# --------------------------------------------------------------------------
# map files
# --------------------------------------------------------------------------

def write_map(rmap: RadioMap) -> bytes:
    """JSON header line, then float64 LE samples and uint8 reachable flags, row-major (y, x)."""
    header = {
        "format": MAP_FORMAT,
        "version": 1,
        **rmap.spec.to_json(),
        "shape": list(rmap.spec.shape),
        "tx": rmap.tx.to_json(),
        "expanded": bool(rmap.expanded),
    }
    return (dump_header(header) + rmap.samples.astype("<f8").tobytes()
            + rmap.reachable.astype(np.uint8).tobytes())


def read_map(data: bytes) -> RadioMap:
    header, payload = split_header(bytes(data))
    if header.get("format") != MAP_FORMAT:
        raise MalformedHeader("not an ndtwin radio map file")
    try:
        spec = ReceiverGridSpec(tuple(header["bounds"]), header["spacing"], header["height"])
        tx = TxConfig.from_json(header["tx"])
        expanded = bool(header["expanded"])
    except (KeyError, TypeError) as exc:
        raise MalformedHeader(f"bad radio map header: {exc}") from exc
    if list(spec.shape) != header.get("shape"):
        raise MalformedHeader("shape does not match bounds and spacing")
    n = spec.shape[0] * spec.shape[1]
    if len(payload) < 9 * n:
        raise TruncatedPayload(f"map payload has {len(payload)} bytes, expected {9 * n}")
    samples = np.frombuffer(payload, "<f8", count=n).astype(np.float64)
    reach = np.frombuffer(payload, np.uint8, count=n, offset=8 * n).astype(bool)
    return RadioMap(spec, samples, reach, tx, expanded)
