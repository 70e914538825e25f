"""Navigation and reflex command laws plus their per-step reward evaluators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import PassabilityField, phi_dyn, phi_env_at
from .planner import Goal, ReferencePath, approach_speed, time_to_contact
from .state import (ActuationBox, Command, ObstacleDisk, RobotState, SafetyGeometry, ZERO_COMMAND,
                    body_to_world, world_to_body, wrap_angle)


@dataclass(frozen=True)
class PathProjection:
    s: float
    lateral: float  # left of the path is positive
    heading_error: float
    tangent: float
    point: tuple[float, float]


def project_onto_path(path: ReferencePath, p, heading: float | None = None) -> PathProjection:
    """Exact nearest point over all segments; ties go to the smaller arc length."""
    pts = path.points
    px, py = float(p[0]), float(p[1])
    if len(pts) == 1:
        q = (float(pts[0, 0]), float(pts[0, 1]))
        tan = float(path.headings[0])
        dx, dy = px - q[0], py - q[1]
        lat = math.cos(tan) * dy - math.sin(tan) * dx
        err = wrap_angle(heading - tan) if heading is not None else 0.0
        return PathProjection(0.0, lat, err, tan, q)
    a = pts[:-1]
    ab = pts[1:] - a
    L2 = ab[:, 0] ** 2 + ab[:, 1] ** 2
    t = np.clip(((px - a[:, 0]) * ab[:, 0] + (py - a[:, 1]) * ab[:, 1]) / L2, 0.0, 1.0)
    qx = a[:, 0] + t * ab[:, 0]
    qy = a[:, 1] + t * ab[:, 1]
    d2 = (px - qx) ** 2 + (py - qy) ** 2
    k = int(np.argmin(d2))
    seg_len = math.sqrt(float(L2[k]))
    tx, ty = float(ab[k, 0]) / seg_len, float(ab[k, 1]) / seg_len
    s = float(path.s[k]) + float(t[k]) * seg_len
    q = (float(qx[k]), float(qy[k]))
    lat = tx * (py - q[1]) - ty * (px - q[0])
    tan = math.atan2(ty, tx)
    err = wrap_angle(heading - tan) if heading is not None else 0.0
    return PathProjection(s, lat, err, tan, q)


@dataclass(frozen=True)
class NavConfig:
    cruise_speed: float = 1.0
    lookahead: float = 0.5
    heading_gain: float = 2.0
    slow_margin: float = 0.5  # phi_env below this scales speed down
    min_speed_factor: float = 0.2
    roughness_slowdown: float = 1.0
    clearance: float = 0.3  # below this phi_env the heading is bent away from the boundary
    clearance_gain: float = 1.0


def nav_command(robot: RobotState, path: ReferencePath, goal: Goal, field: PassabilityField | None = None,
                cfg: NavConfig = NavConfig(), box: ActuationBox = ActuationBox()) -> Command:
    """Pure-pursuit style tracking of the reference path in the body frame."""
    if goal.contains(robot.position):
        return ZERO_COMMAND
    proj = project_onto_path(path, robot.position)
    s_star = min(proj.s + cfg.lookahead, path.length)
    lx, ly = path.point_at(s_star)
    dx, dy = lx - robot.x, ly - robot.y
    dist = math.hypot(dx, dy)
    if dist < 1e-6:
        dx, dy = goal.x - robot.x, goal.y - robot.y
        dist = math.hypot(dx, dy)
        if dist < 1e-9:
            return ZERO_COMMAND
    ux, uy = dx / dist, dy / dist
    speed = cfg.cruise_speed
    if field is not None:
        env = phi_env_at(field, robot.position)
        speed *= min(max(env / cfg.slow_margin, cfg.min_speed_factor), 1.0)
        speed /= 1.0 + cfg.roughness_slowdown * field.roughness_at(robot.position)
        if env < cfg.clearance:
            r = field.resolution
            px, py = robot.position
            gx = phi_env_at(field, (px + r, py)) - phi_env_at(field, (px - r, py))
            gy = phi_env_at(field, (px, py + r)) - phi_env_at(field, (px, py - r))
            gn = math.hypot(gx, gy)
            if gn > 1e-12:
                push = cfg.clearance_gain * (cfg.clearance - env) / cfg.clearance
                ux, uy = ux + push * gx / gn, uy + push * gy / gn
                un = math.hypot(ux, uy)
                if un > 1e-12:
                    ux, uy = ux / un, uy / un
    bx, by = world_to_body(robot.theta, speed * ux, speed * uy)
    omega = cfg.heading_gain * wrap_angle(path.heading_at(s_star) - robot.theta)
    return box.clamp(Command(bx, by, omega))


def select_threat(robot: RobotState, predictions: Sequence[ObstacleDisk], geom: SafetyGeometry) -> int | None:
    """Index of the obstacle with the smallest time to contact (lowest index on ties)."""
    best, idx = math.inf, None
    for k, o in enumerate(predictions):
        tc = time_to_contact(robot, o, geom)
        if idx is None or tc < best:
            best, idx = tc, k
    return idx


@dataclass(frozen=True)
class ReflexConfig:
    max_speed: float = 1.5
    probe_distance: float = 0.5
    horizon: float = 1.0
    min_away_weight: float = 0.3


def reflex_command(robot: RobotState, threat: ObstacleDisk, field: PassabilityField | None,
                   geom: SafetyGeometry, cfg: ReflexConfig = ReflexConfig(),
                   box: ActuationBox = ActuationBox()) -> Command:
    """Blend of moving away from the threat and sidestepping toward open space.

    The sidestep side is whichever perpendicular has more passability margin
    ``probe_distance`` ahead; on a tie, positive body-y wins.
    """
    rx, ry = robot.x - threat.x, robot.y - threat.y
    d = math.hypot(rx, ry)
    if d >= 1e-6:
        nx, ny = rx / d, ry / d
    else:
        sp = math.hypot(threat.vx, threat.vy)
        if sp > 1e-9:
            nx, ny = -threat.vx / sp, -threat.vy / sp
        else:
            nx, ny = body_to_world(robot.theta, 1.0, 0.0)
    left = (-ny, nx)
    right = (ny, -nx)
    if field is not None:
        pd = cfg.probe_distance
        m_left = phi_env_at(field, (robot.x + pd * left[0], robot.y + pd * left[1]))
        m_right = phi_env_at(field, (robot.x + pd * right[0], robot.y + pd * right[1]))
    else:
        m_left = m_right = 0.0
    if m_left > m_right:
        tx, ty = left
    elif m_right > m_left:
        tx, ty = right
    else:
        lb = world_to_body(robot.theta, *left)[1]
        tx, ty = left if lb >= 0.0 else right
    tc = time_to_contact(robot, threat, geom)
    urgency = min(max(1.0 - tc / cfg.horizon, 0.0), 1.0)
    beta = max(urgency, cfg.min_away_weight)
    mag = cfg.max_speed * urgency
    if mag == 0.0:
        return ZERO_COMMAND
    wx, wy = beta * nx + (1 - beta) * tx, beta * ny + (1 - beta) * ty
    bx, by = world_to_body(robot.theta, mag * wx, mag * wy)
    k = 1.0
    if abs(bx) > box.vx_max:
        k = min(k, box.vx_max / abs(bx))
    if abs(by) > box.vy_max:
        k = min(k, box.vy_max / abs(by))
    return Command(k * bx, k * by, 0.0)


# ---------------------------------------------------------------------------
# reward evaluators


@dataclass(frozen=True)
class RewardGains:
    alpha_p: float = 1.0
    alpha_psi: float = 1.0
    alpha_rp: float = 1.0
    alpha_omega: float = 1.0
    alpha_e: float = 0.1
    alpha_phi: float = 1.0
    alpha_v: float = 0.25
    alpha_rp_reg: float = 1.0
    alpha_omega_reg: float = 1.0
    alpha_ene: float = 0.1
    alpha_h: float = 1.0
    alpha_rp_rec: float = 1.0
    nominal_height: float = 0.30
    height_tilt_coupling: float = 0.2

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"reward gain {k} must be strictly positive, got {v}")


class RewardBreakdown:
    """Named reward components; ``total`` is their plain sum."""

    __slots__ = ("components",)

    def __init__(self, **components: float):
        self.components = dict(components)

    @property
    def total(self) -> float:
        return sum(self.components.values())

    def __getitem__(self, k):
        return self.components[k]

    def __repr__(self):
        inner = ", ".join(f"{k}={v:.4g}" for k, v in self.components.items())
        return f"RewardBreakdown({inner}, total={self.total:.4g})"


def effort_proxy(v_body: Command, u: Command, tau: float, c_v: float = 0.5, c_a: float = 0.05) -> float:
    """Stand-in for summed joint power: speed squared plus tracking-acceleration squared."""
    du = u - v_body
    return c_v * (v_body.vx ** 2 + v_body.vy ** 2 + v_body.omega ** 2) + c_a * (du.norm() / tau) ** 2


def height_proxy(state: RobotState, gains: RewardGains) -> float:
    return gains.nominal_height + gains.height_tilt_coupling * math.sqrt(state.tilt_sq())


def nav_reward(prev: RobotState, state: RobotState, path: ReferencePath, effort: float,
               gains: RewardGains = RewardGains()) -> RewardBreakdown:
    s0 = project_onto_path(path, prev.position).s
    proj = project_onto_path(path, state.position, state.theta)
    return RewardBreakdown(
        prog=proj.s - s0,
        track=math.exp(-gains.alpha_p * proj.lateral ** 2 - gains.alpha_psi * proj.heading_error ** 2),
        stable=math.exp(-gains.alpha_rp * state.tilt_sq() - gains.alpha_omega * state.omega ** 2),
        effort=math.exp(-gains.alpha_e * effort),
    )


def reflex_reward(state: RobotState, threat: ObstacleDisk | None, effort: float, geom: SafetyGeometry,
                  gains: RewardGains = RewardGains()) -> RewardBreakdown:
    if threat is None:
        safe = 1.0
    else:
        v_app = max(approach_speed(state, threat), 0.0)
        safe = math.tanh(gains.alpha_phi * phi_dyn(state.position, threat, geom)) - gains.alpha_v * v_app ** 2
    tilt2 = state.tilt_sq()
    h = height_proxy(state, gains)
    return RewardBreakdown(
        safe=safe,
        reg=1.0 / (1.0 + gains.alpha_rp_reg * tilt2 + gains.alpha_omega_reg * state.omega ** 2),
        ene=math.exp(-gains.alpha_ene * effort),
        rec=math.exp(-gains.alpha_h * (h - gains.nominal_height) ** 2 - gains.alpha_rp_rec * tilt2),
    )
