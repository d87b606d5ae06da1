"""Image-method multipath tracer over a triangle mesh.

Coplanar triangles facing the same way are grouped into reflecting planes. For a
transmitter the images across every admissible plane sequence are computed once;
per receiver each sequence is back-traced, bounce points are checked against the
triangles of their plane, and every segment is intersected against the scene
(through a BVH, or brute force for verification) to count wall penetrations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DegenerateScene, EmptyPathList, InvariantViolation, NonPositiveDistance
from .frameio import TriangleMesh

SPEED_OF_LIGHT = 299_792_458.0
EPS = 1e-6            # offset from surfaces when re-launching segments [m]
SIDE_EPS = 1e-9       # minimum distance from a reflecting plane [m]
MERGE_TOL = 1e-7      # crossings closer than this along a segment count once [m]
LEAF_SIZE = 4
MAX_ORDER = 3


@dataclass(frozen=True)
class TxConfig:
    position: tuple[float, float, float]
    power: float = 43.0
    frequency: float = 1.8e9
    tx_gain: float = 0.0
    rx_gain: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if not self.frequency > 0:
            raise InvariantViolation("frequency must be positive")
        if not math.isfinite(self.power):
            raise InvariantViolation("transmit power must be finite")

    def to_json(self) -> dict:
        return {"position": list(self.position), "power": self.power, "frequency": self.frequency,
                "tx_gain": self.tx_gain, "rx_gain": self.rx_gain}

    @classmethod
    def from_json(cls, obj: dict) -> "TxConfig":
        return cls(tuple(obj["position"]), float(obj["power"]), float(obj["frequency"]),
                   float(obj.get("tx_gain", 0.0)), float(obj.get("rx_gain", 0.0)))


@dataclass(frozen=True)
class MaterialModel:
    reflection_loss: float = 6.0
    transmission_loss: float = 10.0

    def __post_init__(self):
        if self.reflection_loss < 0 or self.transmission_loss < 0:
            raise InvariantViolation("material losses must be non-negative")


@dataclass(eq=False)
class PropagationPath:
    vertices: np.ndarray  # (bounces + 2, 3): tx, bounce points..., rx
    length: float
    bounces: int
    penetrations: int
    power: float

    def to_json(self) -> dict:
        return {"vertices": self.vertices.tolist(), "length": self.length, "bounces": self.bounces,
                "penetrations": self.penetrations, "power_dbm": self.power}


def fspl(distance: float, frequency: float) -> float:
    """Free-space path loss in dB."""
    if not distance > 0:
        raise NonPositiveDistance(f"distance must be positive, got {distance}")
    return 20.0 * math.log10(4.0 * math.pi * distance * frequency / SPEED_OF_LIGHT)


def _fspl_array(distance: np.ndarray, frequency: float) -> np.ndarray:
    return 20.0 * np.log10(4.0 * np.pi * distance * frequency / SPEED_OF_LIGHT)


def power_sum(powers) -> float:
    """Non-coherent sum of dBm values. Order independent (exactly rounded linear sum)."""
    powers = list(powers)
    if not powers:
        raise EmptyPathList("cannot aggregate an empty path list")
    return 10.0 * math.log10(math.fsum(10.0 ** (float(p) / 10.0) for p in powers))


def received_power(paths: list[PropagationPath]) -> float:
    return power_sum(p.power for p in paths)


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True, inline="always")
def _tri_t(ox, oy, oz, dx, dy, dz, v0, e1, e2, i):
    # Moller-Trumbore, two-sided; returns inf on miss.
    ax, ay, az = e1[i, 0], e1[i, 1], e1[i, 2]
    bx, by, bz = e2[i, 0], e2[i, 1], e2[i, 2]
    px = dy * bz - dz * by
    py = dz * bx - dx * bz
    pz = dx * by - dy * bx
    det = ax * px + ay * py + az * pz
    if det == 0.0:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = ox - v0[i, 0], oy - v0[i, 1], oz - v0[i, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * az - sz * ay
    qy = sz * ax - sx * az
    qz = sx * ay - sy * ax
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (bx * qx + by * qy + bz * qz) * inv


@numba.njit(cache=True, nogil=True, inline="always")
def _box_enter(ox, oy, oz, dx, dy, dz, lo, hi, node, t0, t1):
    # Slab test; returns entry parameter or inf when [t0, t1] misses the box.
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[node, a] or o[a] > hi[node, a]:
                return np.inf
        else:
            ta = (lo[node, a] - o[a]) / d[a]
            tb = (hi[node, a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return np.inf
    return t0


@numba.njit(cache=True, nogil=True)
def _nearest_bvh(ox, oy, oz, dx, dy, dz, tmin, tmax, lo, hi, left, right, start, count, prims, v0, e1, e2):
    best_t = tmax
    best_i = -1
    if lo.shape[0] == 0:
        return best_i, np.inf
    stack = np.empty(256, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_enter(ox, oy, oz, dx, dy, dz, lo, hi, node, tmin, best_t) == np.inf:
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                i = prims[k]
                t = _tri_t(ox, oy, oz, dx, dy, dz, v0, e1, e2, i)
                if t < np.inf and t > tmin and t <= tmax and (
                        best_i < 0 or t < best_t or (t == best_t and i < best_i)):
                    best_t = t
                    best_i = i
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    if best_i < 0:
        return -1, np.inf
    return best_i, best_t


@numba.njit(cache=True, nogil=True)
def _nearest_brute(ox, oy, oz, dx, dy, dz, tmin, tmax, v0, e1, e2):
    best_t = tmax
    best_i = -1
    for i in range(v0.shape[0]):
        t = _tri_t(ox, oy, oz, dx, dy, dz, v0, e1, e2, i)
        if t < np.inf and t > tmin and t <= tmax and (
                best_i < 0 or t < best_t or (t == best_t and i < best_i)):
            best_t = t
            best_i = i
    if best_i < 0:
        return -1, np.inf
    return best_i, best_t


@numba.njit(cache=True, nogil=True)
def _nearest_batch(origins, dirs, tmin, tmax, use_bvh, lo, hi, left, right, start, count, prims, v0, e1, e2):
    n = origins.shape[0]
    idx = np.empty(n, np.int64)
    ts = np.empty(n, np.float64)
    for r in range(n):
        o = origins[r]
        d = dirs[r]
        if use_bvh:
            i, t = _nearest_bvh(o[0], o[1], o[2], d[0], d[1], d[2], tmin, tmax,
                                lo, hi, left, right, start, count, prims, v0, e1, e2)
        else:
            i, t = _nearest_brute(o[0], o[1], o[2], d[0], d[1], d[2], tmin, tmax, v0, e1, e2)
        idx[r] = i
        ts[r] = t
    return idx, ts


@numba.njit(cache=True, nogil=True)
def _crossings(ax, ay, az, bx, by, bz, use_bvh, lo, hi, left, right, start, count, prims, v0, e1, e2):
    # Number of distinct surface crossings strictly inside segment a->b, ignoring EPS at both ends.
    dx, dy, dz = bx - ax, by - ay, bz - az
    length = math.sqrt(dx * dx + dy * dy + dz * dz)
    if length <= 2.0 * 1e-6 or v0.shape[0] == 0:
        return 0
    t0 = 1e-6 / length
    t1 = 1.0 - t0
    buf = np.empty(16, np.float64)
    n = 0
    if use_bvh:
        stack = np.empty(256, np.int64)
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_enter(ax, ay, az, dx, dy, dz, lo, hi, node, t0, t1) == np.inf:
                continue
            if count[node] > 0:
                for k in range(start[node], start[node] + count[node]):
                    t = _tri_t(ax, ay, az, dx, dy, dz, v0, e1, e2, prims[k])
                    if t > t0 and t < t1:
                        if n == buf.shape[0]:
                            nb = np.empty(2 * n, np.float64)
                            nb[:n] = buf
                            buf = nb
                        buf[n] = t
                        n += 1
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
    else:
        for i in range(v0.shape[0]):
            t = _tri_t(ax, ay, az, dx, dy, dz, v0, e1, e2, i)
            if t > t0 and t < t1:
                if n == buf.shape[0]:
                    nb = np.empty(2 * n, np.float64)
                    nb[:n] = buf
                    buf = nb
                buf[n] = t
                n += 1
    if n == 0:
        return 0
    ts = np.sort(buf[:n])
    tol = 1e-7 / length
    c = 1
    for k in range(1, n):
        if ts[k] - ts[k - 1] > tol:
            c += 1
    return c


@numba.njit(cache=True, nogil=True)
def _in_group(qx, qy, qz, g, g_lo, g_hi, g_start, g_tris, v0, e1, e2):
    if (qx < g_lo[g, 0] or qx > g_hi[g, 0] or qy < g_lo[g, 1] or qy > g_hi[g, 1]
            or qz < g_lo[g, 2] or qz > g_hi[g, 2]):
        return False
    for k in range(g_start[g], g_start[g + 1]):
        i = g_tris[k]
        wx, wy, wz = qx - v0[i, 0], qy - v0[i, 1], qz - v0[i, 2]
        d00 = e1[i, 0] * e1[i, 0] + e1[i, 1] * e1[i, 1] + e1[i, 2] * e1[i, 2]
        d01 = e1[i, 0] * e2[i, 0] + e1[i, 1] * e2[i, 1] + e1[i, 2] * e2[i, 2]
        d11 = e2[i, 0] * e2[i, 0] + e2[i, 1] * e2[i, 1] + e2[i, 2] * e2[i, 2]
        d20 = wx * e1[i, 0] + wy * e1[i, 1] + wz * e1[i, 2]
        d21 = wx * e2[i, 0] + wy * e2[i, 1] + wz * e2[i, 2]
        den = d00 * d11 - d01 * d01
        u = (d11 * d20 - d01 * d21) / den
        v = (d00 * d21 - d01 * d20) / den
        if u >= -1e-9 and v >= -1e-9 and u + v <= 1.0 + 1e-9:
            return True
    return False


@numba.njit(cache=True, nogil=True)
def _trace_receiver(tx, rx, seqs, seq_order, images, g_n, g_d, g_lo, g_hi, g_start, g_tris,
                    use_bvh, lo, hi, left, right, start, count, prims, v0, e1, e2):
    """Returns (orders, bounce points (n, 3, 3), penetrations, lengths) for one receiver."""
    cap = 16
    orders = np.empty(cap, np.int64)
    pts = np.zeros((cap, 3, 3), np.float64)
    pens = np.empty(cap, np.int64)
    lens = np.empty(cap, np.float64)

    dx, dy, dz = rx[0] - tx[0], rx[1] - tx[1], rx[2] - tx[2]
    orders[0] = 0
    lens[0] = math.sqrt(dx * dx + dy * dy + dz * dz)
    pens[0] = _crossings(tx[0], tx[1], tx[2], rx[0], rx[1], rx[2], use_bvh,
                         lo, hi, left, right, start, count, prims, v0, e1, e2)
    n = 1
    bounce = np.empty((3, 3), np.float64)
    for s in range(seqs.shape[0]):
        r = seq_order[s]
        X0, X1, X2 = rx[0], rx[1], rx[2]
        ok = True
        for k in range(r - 1, -1, -1):
            g = seqs[s, k]
            nx_, ny_, nz_ = g_n[g, 0], g_n[g, 1], g_n[g, 2]
            sx = nx_ * X0 + ny_ * X1 + nz_ * X2 - g_d[g]
            I0, I1, I2 = images[s, k, 0], images[s, k, 1], images[s, k, 2]
            si = nx_ * I0 + ny_ * I1 + nz_ * I2 - g_d[g]
            if sx <= 1e-9 or si >= -1e-9:
                ok = False
                break
            w = sx / (sx - si)
            Q0 = X0 + w * (I0 - X0)
            Q1 = X1 + w * (I1 - X1)
            Q2 = X2 + w * (I2 - X2)
            if not _in_group(Q0, Q1, Q2, g, g_lo, g_hi, g_start, g_tris, v0, e1, e2):
                ok = False
                break
            bounce[k, 0] = Q0
            bounce[k, 1] = Q1
            bounce[k, 2] = Q2
            X0, X1, X2 = Q0, Q1, Q2
        if not ok:
            continue
        # the point arriving at each bounce must be in front of that bounce's plane
        for k in range(r):
            g = seqs[s, k]
            if k == 0:
                p0, p1, p2 = tx[0], tx[1], tx[2]
            else:
                p0, p1, p2 = bounce[k - 1, 0], bounce[k - 1, 1], bounce[k - 1, 2]
            if g_n[g, 0] * p0 + g_n[g, 1] * p1 + g_n[g, 2] * p2 - g_d[g] <= 1e-9:
                ok = False
                break
        if not ok:
            continue
        # duplicate check against already accepted paths of the same order
        dup = False
        for m in range(1, n):
            if orders[m] != r:
                continue
            same = True
            for k in range(r):
                for a in range(3):
                    if abs(pts[m, k, a] - bounce[k, a]) > 1e-9:
                        same = False
            if same:
                dup = True
                break
        if dup:
            continue
        length = 0.0
        npen = 0
        a0, a1, a2 = tx[0], tx[1], tx[2]
        for k in range(r + 1):
            if k < r:
                b0, b1, b2 = bounce[k, 0], bounce[k, 1], bounce[k, 2]
            else:
                b0, b1, b2 = rx[0], rx[1], rx[2]
            length += math.sqrt((b0 - a0) ** 2 + (b1 - a1) ** 2 + (b2 - a2) ** 2)
            npen += _crossings(a0, a1, a2, b0, b1, b2, use_bvh, lo, hi, left, right, start, count, prims, v0, e1, e2)
            a0, a1, a2 = b0, b1, b2
        if n == cap:
            cap *= 2
            o2 = np.empty(cap, np.int64)
            o2[:n] = orders
            orders = o2
            p2_ = np.zeros((cap, 3, 3), np.float64)
            p2_[:n] = pts
            pts = p2_
            e2_ = np.empty(cap, np.int64)
            e2_[:n] = pens
            pens = e2_
            l2 = np.empty(cap, np.float64)
            l2[:n] = lens
            lens = l2
        orders[n] = r
        for k in range(r):
            for a in range(3):
                pts[n, k, a] = bounce[k, a]
        pens[n] = npen
        lens[n] = length
        n += 1
    return orders[:n], pts[:n], pens[:n], lens[:n]


# --------------------------------------------------------------------------
# scene
# --------------------------------------------------------------------------

def _build_bvh(v0: np.ndarray, e1: np.ndarray, e2: np.ndarray):
    t = len(v0)
    if t == 0:
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, np.int64)
        return z3, z3.copy(), zi, zi.copy(), zi.copy(), zi.copy(), zi.copy()
    tri_lo = np.minimum(np.minimum(v0, v0 + e1), v0 + e2)
    tri_hi = np.maximum(np.maximum(v0, v0 + e1), v0 + e2)
    cent = (tri_lo + tri_hi) * 0.5
    prims = np.arange(t, dtype=np.int64)
    lo_l, hi_l, left, right, start, count = [], [], [], [], [], []
    # (node id, begin, end) over the prims array; children are allocated when a node is split
    stack = [(0, 0, t)]
    lo_l.append(None)
    hi_l.append(None)
    left.append(-1)
    right.append(-1)
    start.append(0)
    count.append(0)
    while stack:
        node, b, e = stack.pop()
        ids = prims[b:e]
        lo_l[node] = tri_lo[ids].min(axis=0)
        hi_l[node] = tri_hi[ids].max(axis=0)
        if e - b <= LEAF_SIZE:
            start[node], count[node] = b, e - b
            continue
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = np.argsort(c[:, axis], kind="stable")
        prims[b:e] = ids[order]
        mid = (b + e) // 2
        kids = []
        for _ in range(2):
            kids.append(len(lo_l))
            lo_l.append(None)
            hi_l.append(None)
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
        left[node], right[node] = kids
        stack.append((kids[1], mid, e))
        stack.append((kids[0], b, mid))
    lo = np.array(lo_l)
    hi = np.array(hi_l)
    pad = 1e-9 * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
    return (lo - pad, hi + pad, np.array(left, np.int64), np.array(right, np.int64),
            np.array(start, np.int64), np.array(count, np.int64), prims)


def _plane_groups(corners: np.ndarray, normals: np.ndarray):
    """Group triangles by oriented supporting plane (quantized at 1e-9)."""
    t = len(corners)
    if t == 0:
        return (np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)),
                np.zeros(1, np.int64), np.zeros(0, np.int64))
    offs = np.einsum("ij,ij->i", normals, corners[:, 0])
    key = np.round(np.column_stack([normals, offs]) * 1e9).astype(np.int64)
    uniq, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # order groups by first triangle so numbering follows the mesh
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    gid = rank[inverse]
    g = len(uniq)
    rep = first[order]
    g_n = normals[rep].copy()
    g_d = offs[rep].copy()
    tris = np.argsort(gid, kind="stable").astype(np.int64)
    g_start = np.zeros(g + 1, np.int64)
    np.cumsum(np.bincount(gid, minlength=g), out=g_start[1:])
    flat = corners.reshape(t, 9)
    tlo = np.minimum(np.minimum(flat[:, 0:3], flat[:, 3:6]), flat[:, 6:9])
    thi = np.maximum(np.maximum(flat[:, 0:3], flat[:, 3:6]), flat[:, 6:9])
    g_lo = np.array([tlo[tris[g_start[k]:g_start[k + 1]]].min(axis=0) for k in range(g)]) - 1e-9
    g_hi = np.array([thi[tris[g_start[k]:g_start[k + 1]]].max(axis=0) for k in range(g)]) + 1e-9
    return g_n, g_d, g_lo, g_hi, g_start, tris


class Scene:
    """Immutable tracing scene: triangle arrays, a BVH over them and reflecting-plane groups."""

    def __init__(self, mesh: TriangleMesh, use_bvh: bool = True, _parts=None):
        self.mesh = mesh
        self.use_bvh = use_bvh
        if _parts is not None:
            self.__dict__.update(_parts)
            return
        c = mesh.corners()
        self.v0 = np.ascontiguousarray(c[:, 0]) if len(c) else np.zeros((0, 3))
        self.e1 = np.ascontiguousarray(c[:, 1] - c[:, 0]) if len(c) else np.zeros((0, 3))
        self.e2 = np.ascontiguousarray(c[:, 2] - c[:, 0]) if len(c) else np.zeros((0, 3))
        self.bvh = _build_bvh(self.v0, self.e1, self.e2)
        self.groups = _plane_groups(c, mesh.normals)
        self._seq_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.v0)

    @property
    def n_planes(self) -> int:
        return len(self.groups[1])

    def with_bvh(self, use_bvh: bool) -> "Scene":
        """Same geometry, switching the intersection backend."""
        parts = {k: v for k, v in self.__dict__.items() if k not in ("mesh", "use_bvh")}
        return Scene(self.mesh, use_bvh, _parts=parts)

    def _args(self):
        return (self.use_bvh, *self.bvh[:6], self.bvh[6], self.v0, self.e1, self.e2)

    def intersect(self, origin, direction, tmin: float = 0.0, tmax: float = np.inf) -> tuple[int, float]:
        """Nearest hit ``(triangle index, t)`` with ``tmin < t <= tmax``; ``(-1, inf)`` on a miss.

        Ties in ``t`` go to the smallest triangle index.
        """
        idx, ts = self.intersect_many(np.atleast_2d(origin), np.atleast_2d(direction), tmin, tmax)
        return int(idx[0]), float(ts[0])

    def intersect_many(self, origins, directions, tmin: float = 0.0, tmax: float = np.inf):
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
        return _nearest_batch(o, d, float(tmin), float(tmax), *self._args())

    def crossings(self, a, b) -> int:
        """Distinct surfaces crossed by the open segment a-b."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        return int(_crossings(a[0], a[1], a[2], b[0], b[1], b[2], *self._args()))

    def sequences(self, max_order: int) -> tuple[np.ndarray, np.ndarray]:
        """All plane sequences up to ``max_order`` with no plane repeated back to back."""
        if max_order in self._seq_cache:
            return self._seq_cache[max_order]
        g = self.n_planes
        rows = [np.zeros((0, 3), np.int64)]
        orders = [np.zeros(0, np.int64)]
        prev = None
        for r in range(1, max_order + 1):
            if g == 0:
                break
            if r == 1:
                cur = np.arange(g, dtype=np.int64)[:, None]
            else:
                a = np.repeat(prev, g, axis=0)
                b = np.tile(np.arange(g, dtype=np.int64), len(prev))[:, None]
                cur = np.hstack([a, b])
                cur = cur[cur[:, -1] != cur[:, -2]]
            prev = cur
            padded = np.full((len(cur), 3), -1, np.int64)
            padded[:, :r] = cur
            rows.append(padded)
            orders.append(np.full(len(cur), r, np.int64))
        out = (np.concatenate(rows), np.concatenate(orders))
        self._seq_cache[max_order] = out
        return out

    def images(self, tx, max_order: int):
        """Sequences that survive the front-side test and their successive images, shape (S, 3, 3)."""
        seqs, orders = self.sequences(max_order)
        g_n, g_d = self.groups[0], self.groups[1]
        tx = np.asarray(tx, dtype=np.float64)
        imgs = np.zeros((len(seqs), 3, 3))
        keep = np.ones(len(seqs), bool)
        src = np.broadcast_to(tx, (len(seqs), 3)).copy()
        for k in range(max_order):
            active = orders > k
            g = seqs[active, k]
            s = src[active]
            side = np.einsum("ij,ij->i", g_n[g], s) - g_d[g]
            keep[np.flatnonzero(active)[side <= SIDE_EPS]] = False
            img = s - 2.0 * side[:, None] * g_n[g]
            imgs[active, k] = img
            src[active] = img
        return seqs[keep], orders[keep], np.ascontiguousarray(imgs[keep])


def build_scene(mesh: TriangleMesh) -> Scene:
    mesh.validate()
    return Scene(mesh)


def _check_point(p, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise DegenerateScene(f"{what} must be a finite 3D point")
    return p


class _Tracer:
    """Per-transmitter state shared by many receivers (images are computed once)."""

    def __init__(self, scene: Scene, tx: TxConfig, max_order: int):
        if not 0 <= max_order <= MAX_ORDER:
            raise InvariantViolation(f"max_order must be in [0, {MAX_ORDER}]")
        if not np.all(np.isfinite(scene.v0)) or not np.all(np.isfinite(scene.e1)) or not np.all(np.isfinite(scene.e2)):
            raise DegenerateScene("scene geometry is not finite")
        self.scene = scene
        self.tx = tx
        self.txp = _check_point(tx.position, "transmitter")
        self.seqs, self.orders, self.imgs = scene.images(self.txp, max_order)
        self.gr = scene.groups

    def raw(self, rx):
        rx = _check_point(rx, "receiver")
        if np.array_equal(rx, self.txp):
            raise NonPositiveDistance("receiver coincides with transmitter")
        g_n, g_d, g_lo, g_hi, g_start, g_tris = self.gr
        orders, pts, pens, lens = _trace_receiver(
            self.txp, rx, self.seqs, self.orders, self.imgs, g_n, g_d, g_lo, g_hi, g_start, g_tris,
            *self.scene._args())
        return rx, orders, pts, pens, lens

    def powers(self, orders, pens, lens, materials: MaterialModel) -> np.ndarray:
        tx = self.tx
        return (tx.power + tx.tx_gain + tx.rx_gain - _fspl_array(lens, tx.frequency)
                - orders * materials.reflection_loss - pens * materials.transmission_loss)

    def paths(self, rx, materials: MaterialModel) -> list[PropagationPath]:
        rx, orders, pts, pens, lens = self.raw(rx)
        power = self.powers(orders, pens, lens, materials)
        out = []
        for k in range(len(orders)):
            r = int(orders[k])
            verts = np.vstack([self.txp[None], pts[k, :r], rx[None]])
            out.append(PropagationPath(verts, float(lens[k]), r, int(pens[k]), float(power[k])))
        return out

    def power_at(self, rx, materials: MaterialModel) -> float:
        _, orders, _, pens, lens = self.raw(rx)
        return power_sum(self.powers(orders, pens, lens, materials))


def trace_paths(scene: Scene, tx: TxConfig, rx, max_order: int = 2,
                materials: MaterialModel | None = None) -> list[PropagationPath]:
    """Direct path first, then valid specular paths ordered by reflection order."""
    return _Tracer(scene, tx, max_order).paths(rx, materials or MaterialModel())


def paths_to_jsonl(rx, paths: list[PropagationPath]) -> str:
    rx = [float(v) for v in rx]
    return "".join(json.dumps({"rx": rx, **p.to_json()}, sort_keys=True) + "\n" for p in paths)
