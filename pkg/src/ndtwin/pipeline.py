"""Pipeline configuration and the stage functions shared by the CLI and the server.

Configuration is an INI file with a single ``[ndtwin]`` section. Tuples are
comma separated, ``none`` leaves an optional value unset::

    [ndtwin]
    voxel_size = 0.25
    grid_origin = -2.125, -2.125, -0.375
    grid_dims = 56, 48, 14
    rx_bounds = 0.5, 0.5, 9.5, 7.5
    tx_position = -10, 4, 2
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvariantViolation
from .frameio import PointFrame, TriangleMesh, read_frame
from .occmap import GridSpec, OccupancyGrid, extract_mesh, fill_gaps
from .nav import NavGrid, PlannedPath, path_summary_json, plan_radio_aware, plan_shortest
from .radiomap import RadioMap, ReceiverGridSpec, evaluate_map, map_delta, signal_cdf
from .raytrace import MaterialModel, Scene, TxConfig, build_scene

SECTION = "ndtwin"


@dataclass(frozen=True)
class PipelineConfig:
    voxel_size: float = 0.1
    grid_origin: tuple[float, ...] | None = None
    grid_dims: tuple[int, ...] | None = None
    gap_radius: int = 1
    rx_bounds: tuple[float, ...] | None = None
    rx_spacing: float = 0.5
    rx_height: float = 1.0
    tx_position: tuple[float, ...] = (0.0, 0.0, 2.0)
    tx_power: float = 43.0
    frequency: float = 1.8e9
    tx_gain: float = 0.0
    rx_gain: float = 0.0
    reflection_loss: float = 6.0
    transmission_loss: float = 10.0
    max_order: int = 2
    ta_mu: int = 4
    alpha: float = 0.5
    p_window: tuple[float, ...] = (-100.0, -40.0)
    nav_z: tuple[float, ...] = (0.25, 1.0)
    inflate: int = 1
    cdf_step: float = 0.25
    threads: int = 1

    def __post_init__(self):
        try:
            self.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.voxel_size > 0, "voxel_size must be positive")
        need((self.grid_origin is None) == (self.grid_dims is None), "grid_origin and grid_dims go together")
        if self.grid_origin is not None:
            need(len(self.grid_origin) == 3 and len(self.grid_dims) == 3, "grid_origin/grid_dims need 3 values")
            need(min(self.grid_dims) >= 1, "grid_dims must be >= 1")
        need(self.gap_radius >= 1, "gap_radius must be >= 1")
        if self.rx_bounds is not None:
            need(len(self.rx_bounds) == 4, "rx_bounds needs xmin, ymin, xmax, ymax")
        need(self.rx_spacing > 0, "rx_spacing must be positive")
        need(len(self.tx_position) == 3, "tx_position needs 3 values")
        need(self.frequency > 0, "frequency must be positive")
        need(self.reflection_loss >= 0 and self.transmission_loss >= 0, "material losses must be >= 0")
        need(0 <= self.max_order <= 3, "max_order must be in 0..3")
        need(self.ta_mu in (0, 1, 2, 3, 4), "ta_mu must be in 0..4")
        need(0.0 <= self.alpha <= 1.0, "alpha must be in [0, 1]")
        need(len(self.p_window) == 2 and self.p_window[0] < self.p_window[1], "p_window must be (p_min, p_max)")
        need(len(self.nav_z) == 2 and self.nav_z[0] <= self.nav_z[1], "nav_z must be (z_lo, z_hi)")
        need(self.inflate >= 0, "inflate must be >= 0")
        need(self.cdf_step > 0, "cdf_step must be positive")
        need(self.threads >= 1, "threads must be >= 1")
        need(all(math.isfinite(v) for v in (self.voxel_size, self.rx_spacing, self.rx_height, self.tx_power,
                                           self.frequency, *self.tx_position)), "values must be finite")

    # -- derived objects --------------------------------------------------

    def tx(self) -> TxConfig:
        return TxConfig(tuple(self.tx_position), self.tx_power, self.frequency, self.tx_gain, self.rx_gain)

    def materials(self) -> MaterialModel:
        return MaterialModel(self.reflection_loss, self.transmission_loss)

    def grid_spec(self) -> GridSpec | None:
        if self.grid_origin is None:
            return None
        return GridSpec(tuple(self.grid_origin), self.voxel_size, tuple(self.grid_dims))

    def receiver_spec(self, grid_spec: GridSpec) -> ReceiverGridSpec:
        """Configured receiver bounds, or the grid's XY footprint."""
        if self.rx_bounds is not None:
            bounds = tuple(self.rx_bounds)
        else:
            lo, hi = grid_spec.origin, grid_spec.upper
            bounds = (lo[0], lo[1], float(hi[0]), float(hi[1]))
        return ReceiverGridSpec(bounds, self.rx_spacing, self.rx_height)

    def with_overrides(self, pairs: list[str]) -> "PipelineConfig":
        """Apply ``key=value`` strings."""
        raw = {}
        for item in pairs:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            raw[key.strip()] = value.strip()
        return dataclasses.replace(self, **_parse_values(raw))


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(PipelineConfig)}


def _parse_values(raw: dict[str, str]) -> dict:
    types = _field_types()
    out = {}
    for key, text in raw.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if "None" in kind and text.lower() in ("", "none"):
                out[key] = None
            elif "tuple[int" in kind:
                out[key] = tuple(int(v) for v in text.split(","))
            elif "tuple" in kind:
                out[key] = tuple(float(v) for v in text.split(","))
            elif kind == "int":
                out[key] = int(text)
            else:
                out[key] = float(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return out


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not parser.has_section(SECTION):
            raise ConfigError(f"{path} has no [{SECTION}] section")
        cfg = dataclasses.replace(cfg, **_parse_values(dict(parser.items(SECTION))))
    return cfg.with_overrides(overrides or [])


def dump_config(cfg: PipelineConfig) -> str:
    lines = [f"[{SECTION}]"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            text = "none"
        elif isinstance(v, tuple):
            text = ", ".join(repr(x) for x in v)
        else:
            text = repr(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def read_frames(paths) -> list[PointFrame]:
    """Frame files in the given order; directories contribute their files sorted by name."""
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.is_file()))
        else:
            files.append(p)
    frames = []
    for f in files:
        with open(f, "rb") as fh:
            frames.append(read_frame(fh))
    return frames


def trace_bounds(frames: list[PointFrame]) -> tuple[np.ndarray, np.ndarray]:
    pts = [f.header.pose.transform(f.xyz) for f in frames if len(f.points)]
    pts += [np.asarray([f.header.pose.translation], dtype=np.float64) for f in frames]
    allp = np.vstack(pts)
    return allp.min(axis=0), allp.max(axis=0)


def grid_for(frames: list[PointFrame], cfg: PipelineConfig) -> OccupancyGrid:
    """Empty grid from the config, or one covering every point and sensor position."""
    spec = cfg.grid_spec()
    if spec is None:
        if not frames:
            raise ConfigError("no frames and no grid_origin/grid_dims to size the grid")
        lo, hi = trace_bounds(frames)
        s = cfg.voxel_size
        lo = np.floor(lo / s) * s - s
        hi = np.ceil(hi / s) * s + s
        spec = GridSpec.covering(lo, hi, s)
    return OccupancyGrid(spec)


def ingest(frames: list[PointFrame], cfg: PipelineConfig, grid: OccupancyGrid | None = None) -> OccupancyGrid:
    grid = grid_for(frames, cfg) if grid is None else grid.copy()
    for frame in frames:
        grid.integrate(frame)
    return grid


def make_mesh(grid: OccupancyGrid, cfg: PipelineConfig) -> tuple[OccupancyGrid, TriangleMesh]:
    """Gap filling followed by boundary extraction; returns the filled grid too."""
    filled = fill_gaps(grid, cfg.gap_radius)
    return filled, extract_mesh(filled)


def make_map(scene: Scene, filled: OccupancyGrid, cfg: PipelineConfig, threads: int | None = None) -> RadioMap:
    return evaluate_map(scene, cfg.tx(), cfg.receiver_spec(filled.spec), cfg.max_order, cfg.materials(),
                        grid=filled, threads=cfg.threads if threads is None else threads)


@dataclass
class Rebuild:
    filled: OccupancyGrid
    mesh: TriangleMesh
    scene: Scene
    map: RadioMap


def rebuild(grid: OccupancyGrid, cfg: PipelineConfig, threads: int | None = None) -> Rebuild:
    filled, mesh = make_mesh(grid, cfg)
    scene = build_scene(mesh)
    return Rebuild(filled, mesh, scene, make_map(scene, filled, cfg, threads))


@dataclass
class Stage:
    index: int
    frames: int
    occupied: int
    map: RadioMap
    delta: float = float("nan")


def stage_splits(n: int, k: int) -> list[int]:
    """Cumulative frame counts after each of ``k`` contiguous, near-equal stages."""
    if k < 1:
        raise InvariantViolation("stage count must be >= 1")
    if n < k:
        raise InvariantViolation(f"cannot split {n} frames into {k} stages")
    return [int(len(c)) for c in np.array_split(np.arange(n), k)]


def evolve(frames: list[PointFrame], k: int, cfg: PipelineConfig, threads: int | None = None) -> list[Stage]:
    """Replay the trace in ``k`` stages; each stage map is compared with the full-trace map."""
    sizes = stage_splits(len(frames), k)
    grid = grid_for(frames, cfg)  # one grid spec for every stage
    stages = []
    done = 0
    for i, size in enumerate(sizes, 1):
        for frame in frames[done:done + size]:
            grid.integrate(frame)
        done += size
        rb = rebuild(grid, cfg, threads)
        stages.append(Stage(i, done, grid.occupied_count(), rb.map))
    final = stages[-1].map
    for s in stages:
        s.delta = map_delta(s.map, final)
    return stages


def deltas_csv(stages: list[Stage]) -> str:
    return "stage,frames,occupied,delta_db\n" + "".join(
        f"{s.index},{s.frames},{s.occupied},{s.delta!r}\n" for s in stages)


def plan_route(rmap, grid, start, goal, cfg: PipelineConfig, shortest: bool,
               alpha: float | None = None) -> tuple[PlannedPath, list, str]:
    """Path, signal CDF and summary JSON for a start/goal pair."""
    ng = NavGrid.from_occupancy(grid, cfg.nav_z[0], cfg.nav_z[1], cfg.inflate)
    a = cfg.alpha if alpha is None else alpha
    if shortest:
        path = plan_shortest(ng, start, goal, rmap)
    else:
        path = plan_radio_aware(ng, rmap, start, goal, a, tuple(cfg.p_window))
    cdf = signal_cdf(rmap, path.waypoints, cfg.cdf_step)
    summary = path_summary_json(path, {"alpha": 1.0 if shortest else a, "shortest": bool(shortest)})
    return path, cdf, summary
