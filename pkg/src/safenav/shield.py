"""Barrier-function safety filter over body-frame velocity commands.

Each barrier h(p, t) yields a half-space a . u >= b through the condition
dh/dt + alpha * h >= 0 with the base treated as a velocity-controlled single
integrator. The filter returns the closest command (Euclidean) inside all
half-spaces and the actuation box.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

from .fields import PassabilityField, phi_env_at
from .state import ActuationBox, Command, ObstacleDisk, RobotState, SafetyGeometry, ZERO_COMMAND

TOL = 1e-9

PASSTHROUGH = "passthrough"
FILTERED = "filtered"
RELAXED = "relaxed"
EMERGENCY = "emergency"


@dataclass(frozen=True)
class AffineConstraint:
    """``a . u >= b``; ``h`` is the barrier value it came from (box rows: +inf)."""

    a: tuple[float, float, float]
    b: float
    tag: str  # "env", "dyn:<id>" or "box"
    h: float = math.inf

    def __post_init__(self):
        if len(self.a) != 3 or not all(math.isfinite(v) for v in self.a) or not math.isfinite(self.b):
            raise ValueError(f"constraint must be finite, got a={self.a}, b={self.b}")

    @property
    def is_dyn(self) -> bool:
        return self.tag.startswith("dyn")

    def slack(self, u) -> float:
        return self.a[0] * u[0] + self.a[1] * u[1] + self.a[2] * u[2] - self.b


@dataclass(frozen=True)
class SafeSet:
    constraints: tuple[AffineConstraint, ...]
    box: ActuationBox = ActuationBox()

    def box_rows(self) -> list[AffineConstraint]:
        rows = []
        for k, lim in enumerate(self.box.bounds):
            e = [0.0, 0.0, 0.0]
            e[k] = 1.0
            rows.append(AffineConstraint(tuple(e), -lim, "box"))
            e = [0.0, 0.0, 0.0]
            e[k] = -1.0
            rows.append(AffineConstraint(tuple(e), -lim, "box"))
        return rows

    def without(self, drop: AffineConstraint) -> "SafeSet":
        return SafeSet(tuple(c for c in self.constraints if c is not drop), self.box)


@dataclass(frozen=True)
class BarrierEval:
    h: float
    grad: tuple[float, float]  # world frame
    dhdt: float
    contact: bool = False


@dataclass(frozen=True)
class ShieldResult:
    u: Command
    status: str
    enforced: SafeSet
    dropped: int = 0


def eval_h_env(robot: RobotState, field: PassabilityField) -> BarrierEval:
    """Passability margin with a central-difference gradient (step = one cell)."""
    p = (robot.x, robot.y)
    d = field.resolution
    h = phi_env_at(field, p)
    gx = (phi_env_at(field, (p[0] + d, p[1])) - phi_env_at(field, (p[0] - d, p[1]))) / (2 * d)
    gy = (phi_env_at(field, (p[0], p[1] + d)) - phi_env_at(field, (p[0], p[1] - d))) / (2 * d)
    return BarrierEval(h, (gx, gy), 0.0)


def eval_h_dyn(robot: RobotState, pred: ObstacleDisk, geom: SafetyGeometry) -> BarrierEval:
    dx, dy = robot.x - pred.x, robot.y - pred.y
    dist = math.hypot(dx, dy)
    contact = dist < 1e-6
    if not contact:
        nx, ny = dx / dist, dy / dist
    else:
        sp = math.hypot(pred.vx, pred.vy)
        if sp > 1e-9:
            nx, ny = -pred.vx / sp, -pred.vy / sp
        else:
            nx, ny = math.cos(robot.theta), math.sin(robot.theta)
    h = dist - geom.effective_radius(pred.radius)
    return BarrierEval(h, (nx, ny), -(nx * pred.vx + ny * pred.vy), contact)


def cbf_constraints(robot: RobotState, barriers: Sequence[BarrierEval], alpha: float = 2.0,
                    tags: Sequence[str] | None = None) -> list[AffineConstraint]:
    """One half-space per barrier; yaw rate never enters a position barrier.

    A barrier with a vanishing gradient cannot be influenced by the command;
    it is dropped when already satisfied and kept (making the set empty)
    otherwise.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    c, s = math.cos(robot.theta), math.sin(robot.theta)
    out = []
    for k, be in enumerate(barriers):
        gx, gy = be.grad
        a = (gx * c + gy * s, -gx * s + gy * c, 0.0)
        b = -alpha * be.h - be.dhdt
        tag = tags[k] if tags is not None else f"dyn:{k}"
        if abs(a[0]) + abs(a[1]) < 1e-12 and b <= 0.0:
            continue
        out.append(AffineConstraint(a, b, tag, be.h))
    return out


def is_safe(u, safe_set: SafeSet, tol: float = TOL) -> bool:
    if not safe_set.box.contains(Command(*u), tol):
        return False
    return all(c.slack(u) >= -tol for c in safe_set.constraints)


def _det3(m) -> float:
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


def _solve(G: list[list[float]], r: list[float]) -> list[float] | None:
    """Solve the small symmetric system ``G lam = r`` (size 1-3); None when singular."""
    n = len(r)
    if n == 1:
        return None if G[0][0] < 1e-12 else [r[0] / G[0][0]]
    if n == 2:
        det = G[0][0] * G[1][1] - G[0][1] * G[1][0]
        if abs(det) < 1e-12:
            return None
        return [(r[0] * G[1][1] - G[0][1] * r[1]) / det, (G[0][0] * r[1] - G[1][0] * r[0]) / det]
    det = _det3(G)
    if abs(det) < 1e-12:
        return None
    out = []
    for k in range(3):
        m = [list(row) for row in G]
        for j in range(3):
            m[j][k] = r[j]
        out.append(_det3(m) / det)
    return out


def min_distance_point(u0, rows: Sequence[AffineConstraint], tol: float = TOL) -> tuple[float, float, float] | None:
    """Exact projection of ``u0`` onto the intersection of ``rows`` by active-set enumeration.

    Subsets of at most three constraints are tried in increasing size; the
    first one whose equality solution has non-negative multipliers and is
    primal feasible is the unique optimum. Returns None when none exists
    (the intersection is empty).
    """
    u0 = (float(u0[0]), float(u0[1]), float(u0[2]))
    n = len(rows)
    A = [c.a for c in rows]
    res = [c.b - (a[0] * u0[0] + a[1] * u0[1] + a[2] * u0[2]) for c, a in zip(rows, A)]
    violated = {i for i in range(n) if res[i] > tol}
    if not violated:
        return u0
    G = [[ai[0] * aj[0] + ai[1] * aj[1] + ai[2] * aj[2] for aj in A] for ai in A]
    for size in (1, 2, 3):
        for idx in itertools.combinations(range(n), size):
            # an active set that u0 already satisfies would make u0 optimal
            if violated.isdisjoint(idx):
                continue
            lam = _solve([[G[i][j] for j in idx] for i in idx], [res[i] for i in idx])
            if lam is None or min(lam) < -1e-12:
                continue
            u = [u0[0], u0[1], u0[2]]
            for l, i in zip(lam, idx):
                a = A[i]
                u[0] += l * a[0]
                u[1] += l * a[1]
                u[2] += l * a[2]
            if all(c.slack(u) >= -tol for c in rows):
                return (u[0], u[1], u[2])
    return None


def project_safe(u_fuse: Command, safe_set: SafeSet, tol: float = TOL) -> ShieldResult:
    """Closest safe command, relaxing the least urgent obstacle constraints when the set is empty."""
    if is_safe(u_fuse, safe_set, tol):
        return ShieldResult(u_fuse, PASSTHROUGH, safe_set)
    current = safe_set
    dropped = 0
    while True:
        u = min_distance_point(u_fuse, list(current.constraints) + current.box_rows(), tol)
        if u is not None:
            status = FILTERED if dropped == 0 else RELAXED
            return ShieldResult(Command(*u), status, current, dropped)
        dyn = [c for c in current.constraints if c.is_dyn]
        if not dyn:
            return ShieldResult(ZERO_COMMAND, EMERGENCY, current, dropped)
        least_urgent = max(dyn, key=lambda c: c.h)
        current = current.without(least_urgent)
        dropped += 1


def build_safe_set(robot: RobotState, field: PassabilityField | None, predictions: Sequence[ObstacleDisk],
                   geom: SafetyGeometry, alpha: float = 2.0, box: ActuationBox = ActuationBox(),
                   only_index: int | None = None, i_star_only: bool = False) -> SafeSet:
    """Env barrier plus one barrier per predicted obstacle (or only ``only_index``)."""
    barriers, tags = [], []
    if field is not None:
        barriers.append(eval_h_env(robot, field))
        tags.append("env")
    for k, o in enumerate(predictions):
        if i_star_only and k != only_index:
            continue
        barriers.append(eval_h_dyn(robot, o, geom))
        tags.append(f"dyn:{getattr(o, 'id', k)}")
    return SafeSet(tuple(cbf_constraints(robot, barriers, alpha, tags)), box)
