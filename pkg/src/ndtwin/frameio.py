"""Bit-exact readers and writers for sensor frames and mesh files.

Frame file layout::

    {"datatype":7,"height":H,...,"pose":{"q":[w,x,y,z],"t":[x,y,z]},...}\n
    <H * W * 16 bytes: little-endian float32 x, y, z, intensity per point>

The header is canonical JSON (sorted keys, no whitespace) so that writing a
frame that was just read reproduces the original bytes.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import InvariantViolation, MalformedHeader, TruncatedPayload, UnsupportedDatatype

FLOAT32 = 7
POINT_STEP = 16
_POINT_DTYPE_LE = np.dtype("<f4")
_POINT_DTYPE_BE = np.dtype(">f4")

STL_HEADER = b"ndtwin binary STL".ljust(80, b"\0")
_STL_RECORD = np.dtype(
    [("normal", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")]
)


# --------------------------------------------------------------------------
# shared container: one JSON header line followed by raw bytes
# --------------------------------------------------------------------------

def dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8") + b"\n"


def split_header(data: bytes) -> tuple[dict, bytes]:
    """Split ``data`` into its decoded JSON header and the remaining payload."""
    nl = data.find(b"\n")
    if nl < 0:
        raise MalformedHeader("header line is not terminated by a newline")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")
    return header, data[nl + 1:]


def _read_all(stream: bytes | bytearray | memoryview | BinaryIO) -> bytes:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return bytes(stream)
    return stream.read()


def _float_list(values, n: int, what: str) -> list[float]:
    if not isinstance(values, list) or len(values) != n:
        raise MalformedHeader(f"{what} must be a list of {n} numbers")
    try:
        return [float(v) for v in values]
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"{what} must be numeric") from exc


# --------------------------------------------------------------------------
# frames
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)  # w, x, y, z

    def validate(self) -> None:
        t = np.asarray(self.translation, dtype=np.float64)
        q = np.asarray(self.rotation, dtype=np.float64)
        if t.shape != (3,) or q.shape != (4,):
            raise InvariantViolation("pose needs a 3-vector translation and a 4-vector quaternion")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(q))):
            raise InvariantViolation("pose contains non-finite values")
        if abs(float(np.sqrt(q @ q)) - 1.0) > 1e-6:
            raise InvariantViolation("pose quaternion is not unit length")

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = (float(v) for v in self.rotation)
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map sensor-frame points (N, 3) into the world frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation_matrix().T + np.asarray(self.translation)

    @classmethod
    def from_yaw(cls, x: float, y: float, z: float, yaw: float) -> "Pose":
        return cls((float(x), float(y), float(z)), (float(np.cos(yaw / 2)), 0.0, 0.0, float(np.sin(yaw / 2))))


@dataclass(frozen=True)
class FrameHeader:
    height: int
    width: int
    datatype: int = FLOAT32
    is_bigendian: bool = False
    point_step: int = POINT_STEP
    stamp: float = 0.0
    pose: Pose = field(default_factory=Pose)

    def to_json(self) -> dict:
        return {
            "height": int(self.height),
            "width": int(self.width),
            "datatype": int(self.datatype),
            "is_bigendian": bool(self.is_bigendian),
            "point_step": int(self.point_step),
            "stamp": float(self.stamp),
            "pose": {"t": [float(v) for v in self.pose.translation], "q": [float(v) for v in self.pose.rotation]},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FrameHeader":
        try:
            height, width = obj["height"], obj["width"]
            datatype, bigendian = obj["datatype"], obj["is_bigendian"]
            point_step, stamp, pose = obj["point_step"], obj["stamp"], obj["pose"]
            t, q = pose["t"], pose["q"]
        except (KeyError, TypeError) as exc:
            raise MalformedHeader(f"missing header field: {exc}") from exc
        for name, v in (("height", height), ("width", width), ("datatype", datatype), ("point_step", point_step)):
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise MalformedHeader(f"{name} must be a non-negative integer")
        if not isinstance(bigendian, bool):
            raise MalformedHeader("is_bigendian must be a boolean")
        if isinstance(stamp, bool) or not isinstance(stamp, (int, float)):
            raise MalformedHeader("stamp must be a number")
        return cls(
            height=height,
            width=width,
            datatype=datatype,
            is_bigendian=bigendian,
            point_step=point_step,
            stamp=float(stamp),
            pose=Pose(tuple(_float_list(t, 3, "pose.t")), tuple(_float_list(q, 4, "pose.q"))),
        )


@dataclass(frozen=True, eq=False)
class PointFrame:
    header: FrameHeader
    points: np.ndarray  # (height * width, 4) float32: x, y, z, intensity

    def __post_init__(self):
        object.__setattr__(self, "points", np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 4))

    @classmethod
    def from_points(cls, points, pose: Pose | None = None, stamp: float = 0.0) -> "PointFrame":
        """Build an unorganized (height 1) frame from an (N, 3) or (N, 4) array."""
        pts = np.asarray(points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise InvariantViolation("points must have shape (N, 3) or (N, 4)")
        if pts.shape[1] == 3:
            pts = np.hstack([pts, np.zeros((len(pts), 1), np.float32)])
        n = len(pts)
        header = FrameHeader(height=1 if n else 0, width=n, stamp=float(stamp), pose=pose or Pose())
        return cls(header, pts)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def validate(self) -> None:
        h = self.header
        if h.datatype != FLOAT32:
            raise InvariantViolation(f"datatype {h.datatype} is not float32 (7)")
        if h.point_step != POINT_STEP:
            raise InvariantViolation(f"point_step must be {POINT_STEP}")
        if h.is_bigendian:
            raise InvariantViolation("frames are always written little-endian")
        if len(self.points) != h.height * h.width:
            raise InvariantViolation("point count does not match height * width")
        if not np.all(np.isfinite(self.points[:, :3])):
            raise InvariantViolation("non-finite point coordinates")
        h.pose.validate()

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointFrame):
            return NotImplemented
        return self.header == other.header and np.array_equal(
            self.points.view(np.uint32), other.points.view(np.uint32)
        )


def read_frame(stream) -> PointFrame:
    data = _read_all(stream)
    obj, payload = split_header(data)
    header = FrameHeader.from_json(obj)
    if header.datatype != FLOAT32:
        raise UnsupportedDatatype(f"datatype {header.datatype} is not supported (only 7 = float32)")
    if header.point_step != POINT_STEP:
        raise MalformedHeader(f"point_step {header.point_step} != {POINT_STEP}")
    n = header.height * header.width
    need = n * POINT_STEP
    if len(payload) < need:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, expected {need}")
    dtype = _POINT_DTYPE_BE if header.is_bigendian else _POINT_DTYPE_LE
    points = np.frombuffer(payload, dtype=dtype, count=n * 4).astype(np.float32).reshape(n, 4)
    if header.is_bigendian:
        header = FrameHeader(header.height, header.width, header.datatype, False,
                             header.point_step, header.stamp, header.pose)
    frame = PointFrame(header, points)
    frame.validate()
    return frame


def write_frame(frame: PointFrame) -> bytes:
    frame.validate()
    return dump_header(frame.header.to_json()) + frame.points.astype(_POINT_DTYPE_LE, copy=False).tobytes()


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------

@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    normals: np.ndarray    # (T, 3) float64, unit

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3)))

    @classmethod
    def from_triangles(cls, vertices, triangles) -> "TriangleMesh":
        """Build a mesh whose normals follow the right-hand rule of each triangle's winding."""
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        return cls(v, t, winding_normals(v, t))

    def __len__(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """Per-triangle vertex coordinates, shape (T, 3, 3)."""
        return self.vertices[self.triangles]

    def validate(self) -> None:
        if len(self.normals) != len(self.triangles):
            raise InvariantViolation("one normal per triangle required")
        if not np.all(np.isfinite(self.vertices)):
            raise InvariantViolation("non-finite vertex coordinates")
        if len(self.triangles) == 0:
            return
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise InvariantViolation("triangle index out of range")
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-6):
            raise InvariantViolation("normals must be unit length")
        c = self.corners()
        area2 = np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
        if np.any(area2 <= 1e-12):
            raise InvariantViolation("degenerate (zero-area) triangle")

    def __eq__(self, other) -> bool:
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.normals, other.normals)
        )


def winding_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    if len(triangles) == 0:
        return np.zeros((0, 3))
    c = vertices[triangles]
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return n / norm


def write_stl(mesh: TriangleMesh) -> bytes:
    mesh.validate()
    rec = np.zeros(len(mesh), dtype=_STL_RECORD)
    rec["normal"] = mesh.normals
    rec["v"] = mesh.corners()
    return STL_HEADER + np.uint32(len(mesh)).astype("<u4").tobytes() + rec.tobytes()


def read_stl(stream) -> TriangleMesh:
    """Read a binary STL written by :func:`write_stl`; shared vertices are merged in first-seen order."""
    data = _read_all(stream)
    if len(data) < 84:
        raise TruncatedPayload("STL shorter than its 84-byte preamble")
    count = int(np.frombuffer(data, "<u4", count=1, offset=80)[0])
    if len(data) < 84 + 50 * count:
        raise TruncatedPayload(f"STL declares {count} triangles but is {len(data)} bytes")
    rec = np.frombuffer(data, dtype=_STL_RECORD, count=count, offset=84)
    corners = rec["v"].astype(np.float64).reshape(-1, 3)
    if count == 0:
        return TriangleMesh.empty()
    uniq, first, inverse = np.unique(corners, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    mesh = TriangleMesh(uniq[order], rank[inverse.reshape(-1)].reshape(-1, 3), rec["normal"].astype(np.float64))
    mesh.validate()
    return mesh


def _fmt(x: float) -> str:
    return repr(float(x))


def write_ply(mesh: TriangleMesh) -> bytes:
    mesh.validate()
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\ncomment ndtwin voxel boundary mesh\n")
    out.write(f"element vertex {len(mesh.vertices)}\n")
    out.write("property double x\nproperty double y\nproperty double z\n")
    out.write(f"element face {len(mesh.triangles)}\n")
    out.write("property list uchar int vertex_indices\n")
    out.write("property double nx\nproperty double ny\nproperty double nz\n")
    out.write("end_header\n")
    for v in mesh.vertices:
        out.write(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}\n")
    for t, n in zip(mesh.triangles, mesh.normals):
        out.write(f"3 {int(t[0])} {int(t[1])} {int(t[2])} {_fmt(n[0])} {_fmt(n[1])} {_fmt(n[2])}\n")
    return out.getvalue().encode("ascii")


def read_ply(stream) -> TriangleMesh:
    """Read the ASCII PLY dialect produced by :func:`write_ply`.

    Faces without the trailing normal properties get normals from their winding.
    """
    text = _read_all(stream).decode("ascii")
    lines = text.split("\n")
    if not lines or lines[0].strip() != "ply":
        raise MalformedHeader("missing 'ply' magic")
    n_vert = n_face = None
    face_props = 0
    current = None
    i = 1
    while True:
        if i >= len(lines):
            raise MalformedHeader("missing end_header")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise MalformedHeader("only ASCII PLY is supported")
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vert = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and current == "face" and tok[1] != "list":
            face_props += 1
        elif tok[0] == "end_header":
            break
    if n_vert is None or n_face is None:
        raise MalformedHeader("PLY needs vertex and face elements")
    body = lines[i:]
    if len(body) < n_vert + n_face:
        raise TruncatedPayload("PLY body shorter than declared element counts")
    verts = np.array([[float(x) for x in body[k].split()[:3]] for k in range(n_vert)], dtype=np.float64).reshape(-1, 3)
    tris, norms = [], []
    for k in range(n_vert, n_vert + n_face):
        tok = body[k].split()
        if int(tok[0]) != 3:
            raise MalformedHeader("only triangular faces are supported")
        tris.append([int(x) for x in tok[1:4]])
        if face_props >= 3:
            norms.append([float(x) for x in tok[4:7]])
    tris = np.array(tris, dtype=np.int64).reshape(-1, 3)
    normals = np.array(norms, dtype=np.float64).reshape(-1, 3) if face_props >= 3 else winding_normals(verts, tris)
    mesh = TriangleMesh(verts, tris, normals)
    mesh.validate()
    return mesh
