"""Command line entry point: ``ndtwin <subcommand>``.

Failures print one JSON object ``{"error": CODE, "message": ...}`` on stderr and
exit with status 2 (1 for unexpected I/O problems).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import bsloc, occmap, pipeline, radiomap, raytrace, synth
from .errors import ConfigError, NDTError
from .frameio import read_ply, read_stl, write_frame, write_ply, write_stl


def _point(text: str, n: int):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _xy(text):
    return _point(text, 2)


def _xyz(text):
    return _point(text, 3)


def _write(path, data: bytes | str) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)


def _config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.load_config(args.config, args.set)
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    return cfg


def _read_grid(path) -> occmap.OccupancyGrid:
    return occmap.read_grid(Path(path).read_bytes())


def _read_mesh(path):
    data = Path(path).read_bytes()
    return read_ply(data) if str(path).lower().endswith(".ply") else read_stl(data)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_ingest(args) -> dict:
    cfg = _config(args)
    frames = pipeline.read_frames(args.frames)
    grid = pipeline.ingest(frames, cfg)
    _write(args.out, occmap.write_grid(grid))
    return {"frames": len(frames), "occupied": grid.occupied_count(), "ignored_points": grid.ignored_points}


def cmd_mesh(args) -> dict:
    cfg = _config(args)
    filled, mesh = pipeline.make_mesh(_read_grid(args.grid), cfg)
    _write(args.out, write_ply(mesh) if args.out.lower().endswith(".ply") else write_stl(mesh))
    if args.grid_out:
        _write(args.grid_out, occmap.write_grid(filled))
    return {"triangles": len(mesh), "occupied": filled.occupied_count()}


def cmd_trace(args) -> dict:
    cfg = _config(args)
    scene = raytrace.build_scene(_read_mesh(args.mesh))
    if args.rx is not None:
        paths = raytrace.trace_paths(scene, cfg.tx(), args.rx, cfg.max_order, cfg.materials())
        text = raytrace.paths_to_jsonl(args.rx, paths)
        if args.out:
            _write(args.out, text)
        else:
            sys.stdout.write(text)
        return {"paths": len(paths), "power_dbm": raytrace.received_power(paths)}
    if not args.grid:
        raise ConfigError("trace needs --grid (receiver bounds and reachability) or --rx")
    if not args.out:
        raise ConfigError("trace needs -o/--out for the map file")
    filled = _read_grid(args.grid)
    rmap = pipeline.make_map(scene, filled, cfg)
    _write(args.out, radiomap.write_map(rmap))
    return {"nodes": int(rmap.reachable.size), "reachable": int(rmap.reachable.sum())}


def cmd_locate(args) -> dict:
    obs = bsloc.read_observations(Path(args.observations).read_text(encoding="utf-8"))
    est = bsloc.estimate_bs(obs, args.height, args.search_radius)
    _write(args.out, bsloc.estimate_to_json(est))
    return est.to_json()


def cmd_plan(args) -> dict:
    cfg = _config(args)
    rmap = radiomap.read_map(Path(args.map).read_bytes())
    path, cdf, summary = pipeline.plan_route(rmap, _read_grid(args.grid), args.start, args.goal, cfg,
                                             args.shortest, args.alpha)
    _write(args.out, path.to_csv())
    if args.cdf:
        _write(args.cdf, radiomap.write_cdf_csv(cdf))
    if args.summary:
        _write(args.summary, summary)
    return json.loads(summary)


def cmd_evolve(args) -> dict:
    cfg = _config(args)
    frames = pipeline.read_frames(args.trace)
    stages = pipeline.evolve(frames, args.stages, cfg)
    out = Path(args.out_dir)
    for s in stages:
        _write(out / f"map_{s.index}.bin", radiomap.write_map(s.map))
    _write(out / "deltas.csv", pipeline.deltas_csv(stages))
    return {"stages": len(stages), "deltas": [s.delta for s in stages]}


def cmd_serve(args) -> dict:
    from .twinserver import serve

    cfg = _config(args)
    host, _, port = args.listen.rpartition(":")
    try:
        port_n = int(port)
    except ValueError:
        raise ConfigError(f"--listen must be host:port, got {args.listen!r}")
    serve(args.state_dir, cfg, host or "127.0.0.1", port_n)
    return {}


def cmd_synth(args) -> dict:
    """Write a demo trace (room scene) plus a matching config file."""
    out = Path(args.out_dir)
    frames = synth.room_trace(args.step)
    for i, f in enumerate(frames):
        _write(out / "frames" / f"{i:04d}.frame", write_frame(f))
    g = synth.ROOM_GRID
    cfg = pipeline.PipelineConfig(voxel_size=g.voxel_size, grid_origin=g.origin, grid_dims=g.dims,
                                  rx_bounds=synth.ROOM_RX_BOUNDS, tx_position=synth.ROOM_TX)
    _write(out / "ndtwin.ini", pipeline.dump_config(cfg))
    return {"frames": len(frames)}


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with an [ndtwin] section")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--threads", type=int, help="worker threads (output does not depend on it)")

    parser = argparse.ArgumentParser(prog="ndtwin", description="Network digital twin pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="integrate frames into an occupancy grid")
    p.add_argument("frames", nargs="+", help="frame files or directories of frame files")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("mesh", parents=[common], help="gap-fill a grid and extract its boundary mesh")
    p.add_argument("grid")
    p.add_argument("-o", "--out", required=True, help=".stl (binary) or .ply")
    p.add_argument("--grid-out", help="also write the gap-filled grid")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("trace", parents=[common], help="trace a radio map (or the paths to one receiver)")
    p.add_argument("mesh")
    p.add_argument("--grid", help="gap-filled grid for bounds and reachability")
    p.add_argument("--rx", type=_xyz, help="single receiver x,y,z; writes paths as JSON lines")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("locate", help="estimate the base-station position from TA observations")
    p.add_argument("observations", help="CSV with x,y,z,n,mu")
    p.add_argument("--height", type=float, required=True, help="known base-station height [m]")
    p.add_argument("--search-radius", type=float)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("plan", parents=[common], help="plan a path over a grid and radio map")
    p.add_argument("--map", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("start", type=_xy, help="x,y")
    p.add_argument("goal", type=_xy, help="x,y")
    p.add_argument("--alpha", type=float)
    p.add_argument("--shortest", action="store_true", help="ignore the radio map in the cost")
    p.add_argument("-o", "--out", required=True, help="waypoint CSV")
    p.add_argument("--cdf", help="signal CDF CSV")
    p.add_argument("--summary", help="summary JSON")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("evolve", parents=[common], help="replay a trace in stages and compare maps")
    p.add_argument("trace", nargs="+")
    p.add_argument("-k", "--stages", type=int, default=3)
    p.add_argument("-o", "--out-dir", required=True)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP twin service")
    p.add_argument("state_dir")
    p.add_argument("--listen", default="127.0.0.1:8080", help="host:port")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("synth", help="write a synthetic demo trace and config")
    p.add_argument("out_dir")
    p.add_argument("--step", type=float, default=0.75, help="metres between scans")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except NDTError as exc:
        sys.stderr.write(json.dumps({"error": exc.code, "message": str(exc)}) + "\n")
        return 2
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "IO_ERROR", "message": str(exc)}) + "\n")
        return 1
    if result:
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
