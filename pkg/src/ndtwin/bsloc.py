"""Timing-Advance range model and base-station position estimation.

One TA step corresponds to ``16 * 64 * 2**-mu`` basic time units of
``1 / (delta_f_max * n_f)`` seconds. That interval is a round-trip time, so the
one-way range granularity is half of it times the propagation speed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateGeometry, InsufficientObservations, InvariantViolation, OutOfRange,
                     UnsupportedNumerology)

# The published granularity table (78.125 m at mu = 0) is exact for v = 3e8 m/s.
PROPAGATION_SPEED = 3.0e8


@dataclass(frozen=True)
class TAConfig:
    mu: int = 4
    delta_f_max: float = 480e3
    n_f: int = 4096
    n_max: int = 3486
    c: float = PROPAGATION_SPEED

    def __post_init__(self):
        if self.mu not in (0, 1, 2, 3, 4):
            raise UnsupportedNumerology(f"numerology {self.mu} is not in 0..4")

    @property
    def t_c(self) -> float:
        return 1.0 / (self.delta_f_max * self.n_f)

    @property
    def granularity(self) -> float:
        return 16 * 64 * 2.0 ** (-self.mu) * self.t_c * self.c / 2.0


@dataclass(frozen=True)
class TAObservation:
    robot_position: tuple[float, float, float]
    n: int
    config: TAConfig = TAConfig()

    def __post_init__(self):
        if not 0 <= self.n <= self.config.n_max:
            raise OutOfRange(f"TA index {self.n} outside [0, {self.config.n_max}]")

    @property
    def range(self) -> float:
        return self.n * self.config.granularity


@dataclass(frozen=True)
class BSEstimate:
    position: tuple[float, float, float]
    residual: float
    iterations: int

    def to_json(self) -> dict:
        return {"position": list(self.position), "residual": self.residual, "iterations": self.iterations}


def ta_granularity(mu: int, config: TAConfig | None = None) -> float:
    if mu not in (0, 1, 2, 3, 4):
        raise UnsupportedNumerology(f"numerology {mu} is not in 0..4")
    base = config or TAConfig()
    return TAConfig(mu, base.delta_f_max, base.n_f, base.n_max, base.c).granularity


def quantize_distance(d: float, mu: int, config: TAConfig | None = None) -> int:
    """Nearest TA index for a one-way distance (ties round up)."""
    if not d >= 0:
        raise InvariantViolation("distance must be non-negative")
    cfg = config or TAConfig(mu)
    n = int(math.floor(d / ta_granularity(mu, cfg) + 0.5))
    if n > cfg.n_max:
        raise OutOfRange(f"distance {d} m needs TA index {n} > {cfg.n_max}")
    return n


def _cost(b: np.ndarray, p: np.ndarray, r: np.ndarray, z: float) -> np.ndarray:
    """Sum of squared range residuals for candidate XY positions ``b`` (..., 2)."""
    dx = b[..., None, 0] - p[:, 0]
    dy = b[..., None, 1] - p[:, 1]
    dist = np.sqrt(dx * dx + dy * dy + (z - p[:, 2]) ** 2)
    return np.sum((dist - r) ** 2, axis=-1)


def grid_search(p: np.ndarray, r: np.ndarray, z: float, cell: float, radius: float) -> np.ndarray:
    """Coarse minimiser over a lattice anchored at the expanded bounding-box corner.

    Ties go to the lexicographically lowest (x, y).
    """
    lo = p[:, :2].min(axis=0) - radius
    hi = p[:, :2].max(axis=0) + radius
    nx = int(math.floor((hi[0] - lo[0]) / cell)) + 1
    ny = int(math.floor((hi[1] - lo[1]) / cell)) + 1
    xs = lo[0] + np.arange(nx) * cell
    ys = lo[1] + np.arange(ny) * cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")  # x-major so argmin breaks ties on lowest x, then y
    cost = _cost(np.stack([gx, gy], axis=-1), p, r, z)
    i = int(np.argmin(cost))
    return np.array([gx.ravel()[i], gy.ravel()[i]])


def gauss_newton(b0: np.ndarray, p: np.ndarray, r: np.ndarray, z: float,
                 max_iter: int = 100, tol: float = 1e-12) -> tuple[np.ndarray, int]:
    """Damped Gauss-Newton; a step is only taken when it lowers the cost."""
    b = np.asarray(b0, dtype=np.float64).copy()
    f = float(_cost(b, p, r, z))
    it = 0
    for it in range(1, max_iter + 1):
        diff = np.column_stack([b[0] - p[:, 0], b[1] - p[:, 1]])
        dist = np.sqrt(np.sum(diff ** 2, axis=1) + (z - p[:, 2]) ** 2)
        dist = np.maximum(dist, 1e-12)
        res = dist - r
        jac = diff / dist[:, None]
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        lam = 1.0
        improved = False
        while lam > 1e-10:
            cand = b + lam * step
            fc = float(_cost(cand, p, r, z))
            if fc < f:
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
        moved = float(np.linalg.norm(cand - b))
        b, f = cand, fc
        if moved < tol:
            break
    return b, it


def estimate_bs(
    observations: list[TAObservation],
    known_height: float,
    search_radius: float | None = None,
    ranges: np.ndarray | None = None,
) -> BSEstimate:
    """Least-squares BS position from TA ranges with the BS height fixed.

    ``ranges`` overrides the quantized ``n * granularity`` ranges (e.g. exact
    distances). ``search_radius`` bounds the coarse search box around the
    observations; by default it is the largest measured range plus one step.
    """
    if len(observations) < 3:
        raise InsufficientObservations(f"need at least 3 observations, got {len(observations)}")
    mus = {o.config.mu for o in observations}
    if len(mus) != 1:
        raise InvariantViolation("all observations must share one numerology")
    cfg = observations[0].config
    g = cfg.granularity
    p = np.array([o.robot_position for o in observations], dtype=np.float64)
    xy = p[:, :2] - p[:, :2].mean(axis=0)
    sv = np.linalg.svd(xy, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("robot positions are collinear")
    r = np.array([o.range for o in observations]) if ranges is None else np.asarray(ranges, dtype=np.float64)
    if search_radius is None:
        search_radius = float(r.max()) + g
    radius = min(cfg.n_max * g, search_radius)
    b0 = grid_search(p, r, known_height, g / 2.0, radius)
    b, iters = gauss_newton(b0, p, r, known_height)
    resid = math.sqrt(float(_cost(b, p, r, known_height)) / len(p))
    return BSEstimate((float(b[0]), float(b[1]), float(known_height)), resid, iters)


def read_observations(text: str) -> list[TAObservation]:
    """CSV with header ``x,y,z,n,mu``."""
    rows = list(csv.DictReader(io.StringIO(text)))
    obs = []
    for row in rows:
        try:
            mu = int(row["mu"])
            obs.append(TAObservation((float(row["x"]), float(row["y"]), float(row["z"])), int(row["n"]), TAConfig(mu)))
        except (KeyError, ValueError, TypeError) as exc:
            raise InvariantViolation(f"bad observation row {row}: {exc}") from exc
    return obs


def write_observations(observations: list[TAObservation]) -> str:
    out = io.StringIO()
    out.write("x,y,z,n,mu\n")
    for o in observations:
        x, y, z = o.robot_position
        out.write(f"{float(x)!r},{float(y)!r},{float(z)!r},{o.n},{o.config.mu}\n")
    return out.getvalue()


def estimate_to_json(est: BSEstimate) -> str:
    return json.dumps(est.to_json(), sort_keys=True, indent=2) + "\n"
