"""HTTP/1.1 + JSON service holding a live twin (grid, scene, radio map).

Writers (frame ingest, rebuild commit) are serialized by one lock and publish a
new immutable :class:`Snapshot`; readers grab the current snapshot reference
and never wait for a writer. Rebuilds run outside the writer lock so frames can
keep arriving; a second concurrent rebuild gets 409.

Endpoints::

    POST /frames      body: frame file, or raw points with the JSON header in X-Frame-Header
    POST /rebuild
    GET  /radio?x=&y=
    POST /plan        {"start": [x, y], "goal": [x, y], "alpha": 0.5, "shortest": false}
    POST /checkpoint  writes grid.bin, filled.bin, mesh.stl, map.bin to the state directory
    GET  /state
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .errors import (BlockedEndpoint, ConfigError, InvariantViolation, MalformedHeader, NDTError, OutOfBounds,
                     TruncatedPayload, Unreachable, UnsupportedDatatype)
from .frameio import dump_header, read_frame, write_stl
from .occmap import OccupancyGrid, read_grid, write_grid
from .pipeline import PipelineConfig, Rebuild, plan_route, rebuild
from .radiomap import RadioMap, interpolate, read_map, write_map

log = logging.getLogger(__name__)

GRID_FILE = "grid.bin"
FILLED_FILE = "filled.bin"
MESH_FILE = "mesh.stl"
MAP_FILE = "map.bin"


class Busy(NDTError):
    code = "REBUILD_RUNNING"


class NoMap(NDTError):
    code = "NO_MAP"


@dataclass(frozen=True)
class Snapshot:
    revision: int
    grid: OccupancyGrid             # never mutated after publication
    built: Rebuild | None
    map: RadioMap | None
    stale: bool

    @property
    def scene_stale(self) -> bool:
        return self.built is None or self.stale


class TwinService:
    def __init__(self, cfg: PipelineConfig, grid: OccupancyGrid | None = None, rmap: RadioMap | None = None,
                 state_dir: str | Path | None = None):
        if grid is None:
            spec = cfg.grid_spec()
            if spec is None:
                raise ConfigError("the service needs grid_origin/grid_dims or a saved grid")
            grid = OccupancyGrid(spec)
        self.cfg = cfg
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self._snap = Snapshot(0, grid, None, rmap, True)
        self._write_lock = threading.Lock()
        self._rebuild_lock = threading.Lock()

    @classmethod
    def from_state_dir(cls, state_dir, cfg: PipelineConfig) -> "TwinService":
        d = Path(state_dir)
        grid = read_grid((d / GRID_FILE).read_bytes()) if (d / GRID_FILE).exists() else None
        rmap = read_map((d / MAP_FILE).read_bytes()) if (d / MAP_FILE).exists() else None
        return cls(cfg, grid, rmap, d)

    @property
    def snapshot(self) -> Snapshot:
        return self._snap

    def add_frame(self, frame) -> dict:
        with self._write_lock:
            snap = self._snap
            grid = snap.grid.copy()
            ignored = grid.integrate(frame)
            self._snap = replace(snap, revision=snap.revision + 1, grid=grid, stale=True)
            return {"revision": self._snap.revision, "ignored_points": ignored}

    def rebuild(self) -> dict:
        if not self._rebuild_lock.acquire(blocking=False):
            raise Busy("a rebuild is already running")
        try:
            start = self._snap
            built = rebuild(start.grid, self.cfg)
            with self._write_lock:
                snap = self._snap
                # frames that arrived meanwhile leave the new map stale
                self._snap = replace(snap, revision=snap.revision + 1, built=built, map=built.map,
                                     stale=snap.grid is not start.grid)
                rev = self._snap.revision
        finally:
            self._rebuild_lock.release()
        return {"revision": rev, "triangles": len(built.mesh), "nodes": int(built.map.reachable.size)}

    def radio(self, x: float, y: float) -> dict:
        snap = self._snap
        if snap.map is None:
            raise NoMap("no radio map has been built")
        return {"power_dbm": interpolate(snap.map, (x, y)), "stale": snap.stale, "revision": snap.revision}

    def plan(self, start, goal, alpha: float | None = None, shortest: bool = False) -> dict:
        snap = self._snap
        if snap.map is None:
            raise NoMap("no radio map has been built")
        grid = snap.built.filled if snap.built is not None else snap.grid
        path, cdf, summary = plan_route(snap.map, grid, start, goal, self.cfg, shortest, alpha)
        return {**json.loads(summary), "path": [[float(x), float(y)] for x, y in path.waypoints],
                "cdf": [[v, q] for v, q in cdf], "stale": snap.stale, "revision": snap.revision}

    def checkpoint(self) -> dict:
        if self.state_dir is None:
            raise ConfigError("no state directory configured")
        snap = self._snap
        self.state_dir.mkdir(parents=True, exist_ok=True)
        files = {GRID_FILE: write_grid(snap.grid)}
        if snap.built is not None:
            files[FILLED_FILE] = write_grid(snap.built.filled)
            files[MESH_FILE] = write_stl(snap.built.mesh)
        if snap.map is not None:
            files[MAP_FILE] = write_map(snap.map)
        for name, data in files.items():
            tmp = self.state_dir / (name + ".tmp")
            tmp.write_bytes(data)
            tmp.replace(self.state_dir / name)
        return {"revision": snap.revision, "files": sorted(files)}

    def state(self) -> dict:
        snap = self._snap
        return {"revision": snap.revision, "occupied": snap.grid.occupied_count(), "stale": snap.stale,
                "triangles": None if snap.built is None else len(snap.built.mesh),
                "has_map": snap.map is not None}


_STATUS = {
    MalformedHeader: 400, TruncatedPayload: 400, UnsupportedDatatype: 400, InvariantViolation: 400,
    OutOfBounds: 404, Busy: 409, NoMap: 409, Unreachable: 422, BlockedEndpoint: 422,
}


def _status_for(exc: NDTError) -> int:
    for cls, status in _STATUS.items():
        if isinstance(exc, cls):
            return status
    return 400


def make_handler(service: TwinService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, obj: dict) -> None:
            body = (json.dumps(obj, sort_keys=True) + "\n").encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> bytes:
            n = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(n) if n > 0 else b""

        def _json_body(self) -> dict:
            try:
                obj = json.loads(self._body() or b"{}")
            except ValueError as exc:
                raise InvariantViolation(f"request body is not JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise InvariantViolation("request body must be a JSON object")
            return obj

        def _dispatch(self, fn) -> None:
            try:
                self._send(200, fn())
            except NDTError as exc:
                self._send(_status_for(exc), {"error": exc.code, "message": str(exc)})

        def do_GET(self):
            url = urlparse(self.path)
            if url.path == "/radio":
                self._dispatch(lambda: self._radio(parse_qs(url.query)))
            elif url.path == "/state":
                self._dispatch(service.state)
            else:
                self._send(404, {"error": "NOT_FOUND", "message": url.path})

        def do_POST(self):
            path = urlparse(self.path).path
            routes = {"/frames": self._frames, "/rebuild": service.rebuild, "/plan": self._plan,
                      "/checkpoint": service.checkpoint}
            if path not in routes:
                self._body()
                self._send(404, {"error": "NOT_FOUND", "message": path})
                return
            self._dispatch(routes[path])

        def _radio(self, query) -> dict:
            try:
                x, y = float(query["x"][0]), float(query["y"][0])
            except (KeyError, ValueError) as exc:
                raise InvariantViolation("query needs numeric x and y") from exc
            return service.radio(x, y)

        def _frames(self) -> dict:
            body = self._body()
            header = self.headers.get("X-Frame-Header")
            if header:
                try:
                    obj = json.loads(header)
                except ValueError as exc:
                    raise MalformedHeader(f"X-Frame-Header is not JSON: {exc}") from exc
                if not isinstance(obj, dict):
                    raise MalformedHeader("X-Frame-Header must be a JSON object")
                body = dump_header(obj) + body
            return service.add_frame(read_frame(body))

        def _plan(self) -> dict:
            req = self._json_body()
            try:
                start = tuple(float(v) for v in req["start"])
                goal = tuple(float(v) for v in req["goal"])
                alpha = None if req.get("alpha") is None else float(req["alpha"])
            except (KeyError, TypeError, ValueError) as exc:
                raise InvariantViolation(f"plan request needs start and goal: {exc}") from exc
            if len(start) != 2 or len(goal) != 2:
                raise InvariantViolation("start and goal are [x, y]")
            return service.plan(start, goal, alpha, bool(req.get("shortest", False)))

    return Handler


def make_server(service: TwinService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), make_handler(service))
    server.daemon_threads = True
    return server


def serve(state_dir, cfg: PipelineConfig, host: str = "127.0.0.1", port: int = 8080) -> None:
    service = TwinService.from_state_dir(state_dir, cfg)
    server = make_server(service, host, port)
    log.info("listening on %s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
