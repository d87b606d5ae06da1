"""Log-odds occupancy voxel grid: frame integration, gap filling and boundary meshing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvariantViolation, SpecMismatch
from .frameio import PointFrame, TriangleMesh, dump_header, split_header

P_HIT = 0.7
P_MISS = 0.4
P_MIN = 0.12
P_MAX = 0.97
OCC_THRESHOLD = 0.5
VOXEL_SIZE = 0.1

OBSERVED = np.uint8(1)
VIRTUAL = np.uint8(2)

GRID_FORMAT = "ndtwin-grid"


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float]
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise InvariantViolation("origin and dims must have three components")
        if not (self.voxel_size > 0 and math.isfinite(self.voxel_size)):
            raise InvariantViolation("voxel_size must be positive")
        if min(self.dims) < 1:
            raise InvariantViolation("every grid dimension must be >= 1")
        if not all(math.isfinite(v) for v in self.origin):
            raise InvariantViolation("origin must be finite")

    @classmethod
    def covering(cls, lo, hi, voxel_size: float) -> "GridSpec":
        """Smallest grid anchored at ``lo`` that contains the box ``[lo, hi]``."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.maximum(np.ceil((hi - lo) / voxel_size - 1e-9).astype(int), 1)
        return cls(tuple(lo), voxel_size, tuple(dims))

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.voxel_size * np.asarray(self.dims)

    def to_grid_coords(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size

    def index_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor(self.to_grid_coords(points)).astype(np.int64)

    def contains_index(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def center(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def to_json(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": self.voxel_size, "dims": list(self.dims)}


@numba.njit(cache=True, nogil=True)
def _mark_free(start, ends, dims, mark):
    # Amanatides-Woo walk from the sensor voxel to each endpoint voxel, restricted to
    # axes that still differ so the walk lands on the endpoint in exactly L1 steps.
    # Neither the sensor voxel nor the endpoint voxel is marked.
    nx, ny, nz = dims[0], dims[1], dims[2]
    c0 = np.empty(3, np.int64)
    for a in range(3):
        c0[a] = np.int64(np.floor(start[a]))
    cur = np.empty(3, np.int64)
    end = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    tmax = np.empty(3, np.float64)
    tdelta = np.empty(3, np.float64)
    for p in range(ends.shape[0]):
        nsteps = 0
        for a in range(3):
            cur[a] = c0[a]
            end[a] = np.int64(np.floor(ends[p, a]))
            d = ends[p, a] - start[a]
            nsteps += abs(end[a] - cur[a])
            if d > 0:
                step[a] = 1
                tdelta[a] = 1.0 / d
                tmax[a] = (cur[a] + 1 - start[a]) / d
            elif d < 0:
                step[a] = -1
                tdelta[a] = -1.0 / d
                tmax[a] = (cur[a] - start[a]) / d
            else:
                step[a] = 0
                tdelta[a] = np.inf
                tmax[a] = np.inf
        for _ in range(nsteps - 1):
            best = -1
            for a in range(3):
                if cur[a] != end[a] and (best < 0 or tmax[a] < tmax[best]):
                    best = a
            if step[best] == 0:
                # endpoint differs along an axis with zero extent: numerically impossible walk
                cur[best] += 1 if end[best] > cur[best] else -1
            else:
                cur[best] += step[best]
                tmax[best] += tdelta[best]
            i, j, k = cur[0], cur[1], cur[2]
            if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
                mark[(i * ny + j) * nz + k] = 1


class OccupancyGrid:
    """Dense log-odds voxel grid.

    ``logodds`` and ``flags`` are (nx, ny, nz) arrays in C order. A voxel whose
    flags are zero has never been observed and reports probability 0.5.
    """

    def __init__(
        self,
        spec: GridSpec,
        p_hit: float = P_HIT,
        p_miss: float = P_MISS,
        p_min: float = P_MIN,
        p_max: float = P_MAX,
        occ_threshold: float = OCC_THRESHOLD,
        logodds: np.ndarray | None = None,
        flags: np.ndarray | None = None,
        *,
        params: tuple[float, float, float, float] | None = None,
    ):
        self.spec = spec
        if params is None:
            params = (logit(p_min), logit(p_max), logit(p_hit), logit(p_miss))
        l_min, l_max, l_hit, l_miss = (float(np.float32(v)) for v in params)
        if not l_min <= 0.0 <= l_max:
            raise InvariantViolation("clamp range must contain 0")
        if not 0.0 < occ_threshold < 1.0:
            raise InvariantViolation("occ_threshold must lie in (0, 1)")
        self.l_min, self.l_max, self.l_hit, self.l_miss = l_min, l_max, l_hit, l_miss
        self.occ_threshold = float(occ_threshold)
        shape = spec.dims
        self.logodds = np.zeros(shape, np.float32) if logodds is None else np.array(logodds, np.float32).reshape(shape)
        self.flags = np.zeros(shape, np.uint8) if flags is None else np.array(flags, np.uint8).reshape(shape)
        self.ignored_points = 0

    @property
    def params(self) -> tuple[float, float, float, float]:
        return (self.l_min, self.l_max, self.l_hit, self.l_miss)

    def copy(self) -> "OccupancyGrid":
        g = OccupancyGrid(self.spec, occ_threshold=self.occ_threshold, logodds=self.logodds,
                          flags=self.flags, params=self.params)
        g.ignored_points = self.ignored_points
        return g

    def probability(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logodds.astype(np.float64)))

    def known(self) -> np.ndarray:
        return self.flags != 0

    def occupied(self) -> np.ndarray:
        return self.known() & (self.probability() >= self.occ_threshold)

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.occupied()))

    def integrate(self, frame: PointFrame) -> int:
        """Integrate ``frame`` in place; returns the number of out-of-bounds points ignored.

        Within one frame each voxel is updated once: voxels holding an endpoint get
        ``l_hit``, other voxels crossed by a sensor ray get ``l_miss``.
        """
        frame.validate()
        if len(frame.points) == 0:
            return 0
        spec = self.spec
        world = frame.header.pose.transform(frame.xyz)
        sensor = np.asarray(frame.header.pose.translation, dtype=np.float64)
        ends = spec.to_grid_coords(world)
        start = spec.to_grid_coords(sensor[None, :])[0]
        if not (np.all(np.isfinite(ends)) and np.all(np.isfinite(start))):
            raise SpecMismatch("frame cannot be expressed in grid coordinates")
        idx = np.floor(ends).astype(np.int64)
        inside = spec.contains_index(idx)
        ignored = int(len(idx) - np.count_nonzero(inside))
        ends, idx = ends[inside], idx[inside]
        ny, nz = spec.dims[1], spec.dims[2]
        hit_lin = np.unique((idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2])
        mark = np.zeros(spec.size, np.uint8)
        if len(ends):
            _mark_free(start, np.ascontiguousarray(ends), np.asarray(spec.dims, np.int64), mark)
        mark[hit_lin] = 0
        miss_lin = np.flatnonzero(mark)

        lo = self.logodds.reshape(-1)
        fl = self.flags.reshape(-1)
        l_min, l_max = np.float32(self.l_min), np.float32(self.l_max)
        lo[miss_lin] = np.clip(lo[miss_lin] + np.float32(self.l_miss), l_min, l_max)
        lo[hit_lin] = np.clip(lo[hit_lin] + np.float32(self.l_hit), l_min, l_max)
        touched = np.concatenate([miss_lin, hit_lin])
        fl[touched] = OBSERVED
        self.ignored_points += ignored
        return ignored

    def occupied_slice(self, z_lo: float, z_hi: float) -> np.ndarray:
        """(nx, ny) mask of columns with an occupied voxel overlapping ``[z_lo, z_hi]``."""
        spec = self.spec
        k0 = int(math.floor((z_lo - spec.origin[2]) / spec.voxel_size))
        k1 = int(math.floor((z_hi - spec.origin[2]) / spec.voxel_size))
        k0, k1 = max(k0, 0), min(k1, spec.dims[2] - 1)
        if k1 < k0:
            return np.zeros(spec.dims[:2], bool)
        return self.occupied()[:, :, k0:k1 + 1].any(axis=2)

    def occupied_at(self, points: np.ndarray) -> np.ndarray:
        """True where a world point falls inside an occupied voxel."""
        idx = self.spec.index_of(np.atleast_2d(points))
        inside = self.spec.contains_index(idx)
        out = np.zeros(len(idx), bool)
        occ = self.occupied()
        j = idx[inside]
        out[inside] = occ[j[:, 0], j[:, 1], j[:, 2]]
        return out


def empty_grid(spec: GridSpec, **kw) -> OccupancyGrid:
    return OccupancyGrid(spec, **kw)


def integrate_frame(grid: OccupancyGrid, frame: PointFrame) -> OccupancyGrid:
    out = grid.copy()
    out.integrate(frame)
    return out


def fill_gaps(grid: OccupancyGrid, radius: int = 1) -> OccupancyGrid:
    """Mark unknown voxels bridged by occupied voxels along an axis as virtual occupied.

    A voxel qualifies when, along some axis, an occupied voxel lies within ``radius``
    steps on both sides. Observed voxels are never changed.
    """
    if radius < 1:
        raise InvariantViolation("radius must be >= 1")
    occ = grid.occupied()
    unknown = ~grid.known()
    bridged = np.zeros_like(occ)
    for axis in range(3):
        n = occ.shape[axis]
        before = np.zeros_like(occ)
        after = np.zeros_like(occ)
        for k in range(1, min(radius, n - 1) + 1):
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            # before[i] |= occ[i - k]
            src[axis], dst[axis] = slice(0, n - k), slice(k, n)
            before[tuple(dst)] |= occ[tuple(src)]
            # after[i] |= occ[i + k]
            src[axis], dst[axis] = slice(k, n), slice(0, n - k)
            after[tuple(dst)] |= occ[tuple(src)]
        bridged |= before & after
    fill = unknown & bridged
    out = grid.copy()
    out.logodds[fill] = np.float32(out.l_max)
    out.flags[fill] = VIRTUAL
    return out


# axis -> (u, v) with u x v = +axis
_FACE_AXES = {0: (1, 2), 1: (2, 0), 2: (0, 1)}


def exposed_faces(occ: np.ndarray) -> list[tuple[int, int, np.ndarray]]:
    """(axis, sign, voxel indices) for each block of boundary faces, in a fixed order."""
    padded = np.pad(occ, 1, constant_values=False)
    out = []
    for axis in range(3):
        for sign in (-1, 1):
            nb = np.roll(padded, -sign, axis=axis)[1:-1, 1:-1, 1:-1]
            out.append((axis, sign, np.argwhere(occ & ~nb)))
    return out


def extract_mesh(grid: OccupancyGrid) -> TriangleMesh:
    """Two outward-facing triangles per face between an occupied and a non-occupied voxel."""
    spec = grid.spec
    nx, ny, nz = spec.dims
    quads = []
    normals = []
    for axis, sign, vox in exposed_faces(grid.occupied()):
        if len(vox) == 0:
            continue
        u, v = _FACE_AXES[axis]
        base = vox.copy()
        if sign > 0:
            base[:, axis] += 1
        eu = np.zeros(3, np.int64)
        ev = np.zeros(3, np.int64)
        eu[u] = 1
        ev[v] = 1
        if sign > 0:
            corners = [base, base + eu, base + eu + ev, base + ev]
        else:
            corners = [base, base + ev, base + eu + ev, base + eu]
        quads.append(np.stack(corners, axis=1))
        n = np.zeros((len(vox), 3))
        n[:, axis] = sign
        normals.append(n)
    if not quads:
        return TriangleMesh.empty()
    quads = np.concatenate(quads)  # (F, 4, 3) lattice indices
    normals = np.concatenate(normals)
    lin = (quads[..., 0] * (ny + 1) + quads[..., 1]) * (nz + 1) + quads[..., 2]
    uniq, inverse = np.unique(lin, return_inverse=True)
    inverse = inverse.reshape(lin.shape)
    lattice = np.stack(np.unravel_index(uniq, (nx + 1, ny + 1, nz + 1)), axis=1)
    # round through float32 so the mesh survives binary STL losslessly
    verts = (np.asarray(spec.origin) + lattice * spec.voxel_size).astype(np.float32).astype(np.float64)
    tris = np.empty((2 * len(quads), 3), np.int64)
    tris[0::2] = inverse[:, [0, 1, 2]]
    tris[1::2] = inverse[:, [0, 2, 3]]
    return TriangleMesh(verts, tris, np.repeat(normals, 2, axis=0))


# --------------------------------------------------------------------------
# snapshot files
# --------------------------------------------------------------------------

def write_grid(grid: OccupancyGrid) -> bytes:
    """JSON header line, then float32 LE log-odds and uint8 flags, both C-ordered over (ix, iy, iz)."""
    header = {
        "format": GRID_FORMAT,
        "version": 1,
        **grid.spec.to_json(),
        "l_min": grid.l_min,
        "l_max": grid.l_max,
        "l_hit": grid.l_hit,
        "l_miss": grid.l_miss,
        "occ_threshold": grid.occ_threshold,
    }
    return dump_header(header) + grid.logodds.astype("<f4").tobytes() + grid.flags.tobytes()


def read_grid(data: bytes) -> OccupancyGrid:
    from .errors import MalformedHeader, TruncatedPayload

    header, payload = split_header(bytes(data))
    if header.get("format") != GRID_FORMAT:
        raise MalformedHeader("not an ndtwin grid file")
    try:
        spec = GridSpec(tuple(header["origin"]), header["voxel_size"], tuple(header["dims"]))
        params = (header["l_min"], header["l_max"], header["l_hit"], header["l_miss"])
        thr = header["occ_threshold"]
    except (KeyError, TypeError) as exc:
        raise MalformedHeader(f"bad grid header: {exc}") from exc
    n = spec.size
    if len(payload) < 5 * n:
        raise TruncatedPayload(f"grid payload has {len(payload)} bytes, expected {5 * n}")
    lo = np.frombuffer(payload, "<f4", count=n).astype(np.float32)
    fl = np.frombuffer(payload, np.uint8, count=n, offset=4 * n)
    grid = OccupancyGrid(spec, occ_threshold=thr, logodds=lo, flags=fl, params=params)
    if np.any(grid.logodds < np.float32(grid.l_min)) or np.any(grid.logodds > np.float32(grid.l_max)):
        raise InvariantViolation("stored log-odds outside the clamp range")
    return grid
