"""2.5D grid maps, passability fields and spatial-temporal feasibility.

Cell ``(row j, col i)`` has its center at
``origin + ((i + 0.5) * resolution, (j + 0.5) * resolution)``; rows run along
world +y. All margins are signed distances in metres, positive where the
robot disk is clear.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .state import Command, ObstacleDisk, RobotState, SafetyGeometry

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridMap2p5D:
    origin: tuple[float, float]
    resolution: float
    blocked: np.ndarray  # (height, width) bool
    elevation: np.ndarray  # (height, width) metres
    roughness: np.ndarray  # (height, width) >= 0

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        shape = np.shape(self.blocked)
        if len(shape) != 2 or shape[0] == 0 or shape[1] == 0:
            raise ValueError("map must have at least one cell")
        for name in ("elevation", "roughness"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} shape {np.shape(getattr(self, name))} != blocked shape {shape}")
        if not np.all(np.isfinite(self.elevation)) or not np.all(np.isfinite(self.roughness)):
            raise ValueError("elevation and roughness must be finite")
        if np.any(np.asarray(self.roughness) < 0):
            raise ValueError("roughness must be non-negative")

    @property
    def height(self) -> int:
        return self.blocked.shape[0]

    @property
    def width(self) -> int:
        return self.blocked.shape[1]

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width * self.resolution, self.height * self.resolution)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World ``(X, Y)`` arrays of cell centers, each shaped like the grid."""
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)

    def cell_of(self, p) -> tuple[int, int]:
        """``(row, col)`` of the cell containing ``p``, clamped into the grid."""
        i = int(math.floor((p[0] - self.origin[0]) / self.resolution))
        j = int(math.floor((p[1] - self.origin[1]) / self.resolution))
        return min(max(j, 0), self.height - 1), min(max(i, 0), self.width - 1)

    def center_of(self, row: int, col: int) -> tuple[float, float]:
        return (
            self.origin[0] + (col + 0.5) * self.resolution,
            self.origin[1] + (row + 0.5) * self.resolution,
        )

    @classmethod
    def empty(cls, width: int, height: int, resolution: float, origin=(0.0, 0.0)) -> "GridMap2p5D":
        z = np.zeros((height, width))
        return cls(tuple(origin), resolution, np.zeros((height, width), dtype=bool), z, z.copy())


def _grid(values, width: int, height: int, name: str, dtype) -> np.ndarray:
    if isinstance(values, list) and values and isinstance(values[0], list):
        if len(values) != height:
            raise ValueError(f"{name}: expected {height} rows, got {len(values)}")
        for r, row in enumerate(values):
            if not isinstance(row, list) or len(row) != width:
                raise ValueError(f"{name}: ragged row {r} (expected {width} values)")
        return np.array(values, dtype=dtype)
    flat = np.asarray(values, dtype=dtype)
    if flat.ndim != 1 or flat.size != width * height:
        raise ValueError(f"{name}: expected {width * height} row-major values, got shape {flat.shape}")
    return flat.reshape(height, width)


def map_from_dict(d: dict) -> GridMap2p5D:
    try:
        width, height = int(d["width"]), int(d["height"])
        resolution = float(d["resolution"])
        origin = tuple(float(v) for v in d["origin"])
    except KeyError as e:
        raise ValueError(f"map is missing key {e.args[0]!r}") from None
    if width <= 0 or height <= 0:
        raise ValueError("map must have at least one cell")
    blocked = _grid(d["blocked"], width, height, "blocked", bool)
    elevation = _grid(d.get("elevation", [0.0] * (width * height)), width, height, "elevation", float)
    roughness = _grid(d.get("roughness", [0.0] * (width * height)), width, height, "roughness", float)
    return GridMap2p5D(origin, resolution, blocked, elevation, roughness)


def map_to_dict(m: GridMap2p5D) -> dict:
    return {
        "resolution": m.resolution,
        "origin": list(m.origin),
        "width": m.width,
        "height": m.height,
        "blocked": m.blocked.astype(int).tolist(),
        "elevation": m.elevation.tolist(),
        "roughness": m.roughness.tolist(),
    }


def load_map(path) -> GridMap2p5D:
    with open(path) as f:
        return map_from_dict(json.load(f))


def save_map(m: GridMap2p5D, path) -> None:
    Path(path).write_text(json.dumps(map_to_dict(m)))


class PassabilityField:
    """Sampled terrain, static and combined margins over a map's cells."""

    def __init__(self, grid: GridMap2p5D, geom: SafetyGeometry, phi_terr: np.ndarray,
                 phi_static: np.ndarray):
        self.grid = grid
        self.geom = geom
        self.phi_terr = phi_terr
        self.phi_static = phi_static
        self.phi_env = np.minimum(phi_terr, phi_static)
        self.feasible = self.phi_env > 0
        self._flat_arr = self.phi_env.ravel().copy()
        self._flat = self._flat_arr.tolist()
        self._rough = grid.roughness.ravel().tolist()
        self._w = grid.width
        self._h = grid.height
        self._x0, self._y0 = grid.origin
        self._res = grid.resolution
        self._x1 = self._x0 + self._w * self._res
        self._y1 = self._y0 + self._h * self._res

    @property
    def resolution(self) -> float:
        return self._res

    @property
    def all_blocked(self) -> bool:
        return not bool(self.feasible.any())

    def contains(self, p) -> bool:
        return self._x0 <= p[0] <= self._x1 and self._y0 <= p[1] <= self._y1

    def phi_env_at(self, p) -> float:
        return phi_env_at(self, p)

    def roughness_at(self, p) -> float:
        if not self.contains(p):
            return 0.0
        j, i = self.grid.cell_of(p)
        return self._rough[j * self._w + i]

    def phi_env_many(self, pts) -> np.ndarray:
        """Vectorized :func:`phi_env_at` over an ``(N, 2)`` array."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        x, y = pts[:, 0], pts[:, 1]
        w, h = self._w, self._h
        fx = np.minimum(np.maximum((x - self._x0) / self._res - 0.5, 0.0), w - 1)
        fy = np.minimum(np.maximum((y - self._y0) / self._res - 0.5, 0.0), h - 1)
        i0 = np.minimum(fx.astype(int), max(w - 2, 0))
        j0 = np.minimum(fy.astype(int), max(h - 2, 0))
        tx = fx - i0
        ty = fy - j0
        di = 1 if w > 1 else 0
        dj = w if h > 1 else 0
        base = j0 * w + i0
        g = self._flat_arr
        v = ((1 - ty) * ((1 - tx) * g[base] + tx * g[base + di])
             + ty * ((1 - tx) * g[base + dj] + tx * g[base + dj + di]))
        dx = np.maximum(np.maximum(self._x0 - x, x - self._x1), 0.0)
        dy = np.maximum(np.maximum(self._y0 - y, y - self._y1), 0.0)
        outside = (dx > 0) | (dy > 0)
        if outside.any():
            v = np.where(outside, -(np.hypot(dx, dy) + self.geom.robot_radius), v)
        return v


def _distance_to(mask: np.ndarray, resolution: float, cap: float) -> np.ndarray:
    """Center-to-center distance from every cell to the nearest ``mask`` cell.

    Cells inside ``mask`` get 0; an empty mask yields ``cap`` everywhere.
    """
    if not mask.any():
        return np.full(mask.shape, cap)
    return np.minimum(ndimage.distance_transform_edt(~mask, sampling=resolution), cap)


def _signed_margin(bad: np.ndarray, resolution: float, cap: float, robot_radius: float) -> np.ndarray:
    outside = _distance_to(bad, resolution, cap)
    inside = _distance_to(~bad, resolution, cap)
    return np.where(bad, -inside, outside) - robot_radius


def terrain_violations(grid: GridMap2p5D, roughness_limit: float, slope_limit: float) -> np.ndarray:
    """Cells whose roughness or elevation slope exceeds its limit."""
    elev = np.asarray(grid.elevation, dtype=float)
    if elev.shape[0] > 1 and elev.shape[1] > 1:
        gy, gx = np.gradient(elev, grid.resolution)
    else:
        gy = np.zeros_like(elev)
        gx = np.zeros_like(elev)
        if elev.shape[1] > 1:
            gx = np.gradient(elev, grid.resolution, axis=1)
        if elev.shape[0] > 1:
            gy = np.gradient(elev, grid.resolution, axis=0)
    slope = np.hypot(gx, gy)
    return (np.asarray(grid.roughness) > roughness_limit) | (slope > slope_limit)


def build_passability_field(grid: GridMap2p5D, geom: SafetyGeometry,
                            roughness_limit: float = 1.0, slope_limit: float = 0.5) -> PassabilityField:
    """Signed terrain/static margins at every cell center.

    Free cells carry ``distance to nearest bad cell center - robot_radius``;
    bad cells carry ``-(distance to nearest good cell center) - robot_radius``.
    Distances are capped at the map diagonal.
    """
    cap = grid.diagonal
    blocked = np.asarray(grid.blocked, dtype=bool)
    phi_static = _signed_margin(blocked, grid.resolution, cap, geom.robot_radius)
    terr_bad = terrain_violations(grid, roughness_limit, slope_limit)
    phi_terr = _signed_margin(terr_bad, grid.resolution, cap, geom.robot_radius)
    field = PassabilityField(grid, geom, phi_terr, phi_static)
    if field.all_blocked:
        log.warning("passability field has no feasible cell (all phi_env <= 0)")
    return field


def phi_env_at(field: PassabilityField, p) -> float:
    """Bilinear environment margin at world point ``p``.

    Points outside the map rectangle return ``-(distance outside + r_R)``.
    """
    x, y = p[0], p[1]
    x0, y0, res = field._x0, field._y0, field._res
    if x < x0 or x > field._x1 or y < y0 or y > field._y1:
        dx = max(x0 - x, x - field._x1, 0.0)
        dy = max(y0 - y, y - field._y1, 0.0)
        return -(math.hypot(dx, dy) + field.geom.robot_radius)
    w, h = field._w, field._h
    fx = min(max((x - x0) / res - 0.5, 0.0), w - 1)
    fy = min(max((y - y0) / res - 0.5, 0.0), h - 1)
    i0 = min(int(fx), max(w - 2, 0))
    j0 = min(int(fy), max(h - 2, 0))
    tx = fx - i0
    ty = fy - j0
    i1 = min(i0 + 1, w - 1)
    j1 = min(j0 + 1, h - 1)
    g = field._flat
    a = g[j0 * w + i0]
    b = g[j0 * w + i1]
    c = g[j1 * w + i0]
    d = g[j1 * w + i1]
    return (1 - tx) * (1 - ty) * a + tx * (1 - ty) * b + (1 - tx) * ty * c + tx * ty * d


def phi_dyn(p, obs: ObstacleDisk, geom: SafetyGeometry) -> float:
    """Center distance to the obstacle minus ``r_O + r_R + delta``."""
    return math.hypot(p[0] - obs.x, p[1] - obs.y) - geom.effective_radius(obs.radius)


def phi_st(p, field: PassabilityField, obstacles: Sequence[ObstacleDisk], geom: SafetyGeometry) -> float:
    v = phi_env_at(field, p)
    for o in obstacles:
        d = phi_dyn(p, o, geom)
        if d < v:
            v = d
    return v


def hinge(z: float) -> float:
    return z if z > 0.0 else 0.0


@dataclass
class LagrangianWeights:
    """Violation weight schedule ``w(t)`` plus the running cost ``l(x, u)``.

    ``schedule`` is either a callable of time or a per-step sequence.
    """

    schedule: Callable[[float], float] | Sequence[float]
    running_cost: Callable[[RobotState, Command], float]

    def weight(self, k: int, t: float) -> float:
        w = self.schedule(t) if callable(self.schedule) else self.schedule[k]
        if w < 0:
            raise ValueError(f"constraint weight must be non-negative, got w({t})={w}")
        return float(w)


def relaxed_lagrangian(traj: Sequence[tuple[RobotState, Command, float]], weights: LagrangianWeights,
                       field: PassabilityField, obstacle_history: Sequence[Sequence[ObstacleDisk]],
                       geom: SafetyGeometry) -> float:
    """Discretized running cost plus hinge-weighted feasibility violations.

    ``obstacle_history[k]`` holds the obstacles present at step ``k``. When
    the spatial-temporal margin stays positive, only the running cost survives.
    """
    if len(traj) == 0:
        raise ValueError("trajectory is empty")
    if len(obstacle_history) != len(traj):
        raise ValueError(
            f"obstacle history has {len(obstacle_history)} entries for {len(traj)} trajectory steps")
    total = 0.0
    t = 0.0
    for k, (x, u, dt) in enumerate(traj):
        if not dt > 0:
            raise ValueError(f"step {k} has non-positive dt={dt}")
        violation = hinge(-phi_st(x.position, field, obstacle_history[k], geom))
        cost = weights.running_cost(x, u)
        if violation > 0.0:
            cost += weights.weight(k, t) * violation
        total += cost * dt
        t += dt
    return total
