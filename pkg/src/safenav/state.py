"""Small value types shared by every layer of the stack.

Everything here is a plain immutable value built from Python floats; the
per-step control loop creates many of these, so they avoid numpy on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def body_to_world(theta: float, vx: float, vy: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    return c * vx - s * vy, s * vx + c * vy


def world_to_body(theta: float, wx: float, wy: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    return c * wx + s * wy, -s * wx + c * wy


class Command(NamedTuple):
    """Body-frame velocity command ``(v_x, v_y, omega)``."""

    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def __sub__(self, other):
        return Command(self.vx - other[0], self.vy - other[1], self.omega - other[2])

    def scale(self, k: float) -> "Command":
        return Command(k * self.vx, k * self.vy, k * self.omega)

    def norm(self) -> float:
        return math.sqrt(self.vx * self.vx + self.vy * self.vy + self.omega * self.omega)

    def norm_inf(self) -> float:
        return max(abs(self.vx), abs(self.vy), abs(self.omega))


ZERO_COMMAND = Command(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ActuationBox:
    """Symmetric per-axis command bounds."""

    vx_max: float = 1.5
    vy_max: float = 1.0
    omega_max: float = 2.0

    def __post_init__(self):
        if not (self.vx_max > 0 and self.vy_max > 0 and self.omega_max > 0):
            raise ValueError("actuation bounds must be positive")
        if not all(math.isfinite(v) for v in (self.vx_max, self.vy_max, self.omega_max)):
            raise ValueError("actuation bounds must be finite")

    @property
    def bounds(self) -> tuple[float, float, float]:
        return (self.vx_max, self.vy_max, self.omega_max)

    def clamp(self, u: Command) -> Command:
        return Command(
            min(max(u.vx, -self.vx_max), self.vx_max),
            min(max(u.vy, -self.vy_max), self.vy_max),
            min(max(u.omega, -self.omega_max), self.omega_max),
        )

    def contains(self, u: Command, tol: float = 1e-9) -> bool:
        return (
            abs(u.vx) <= self.vx_max + tol
            and abs(u.vy) <= self.vy_max + tol
            and abs(u.omega) <= self.omega_max + tol
        )


@dataclass(frozen=True)
class RobotState:
    """Planar pose, realized body velocity and a roll/pitch tilt proxy."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def body_velocity(self) -> Command:
        return Command(self.vx, self.vy, self.omega)

    def world_velocity(self) -> tuple[float, float]:
        return body_to_world(self.theta, self.vx, self.vy)

    def tilt_sq(self) -> float:
        return self.roll * self.roll + self.pitch * self.pitch


@dataclass(frozen=True)
class ObstacleDisk:
    """Circular dynamic obstacle in the world frame."""

    x: float
    y: float
    vx: float
    vy: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"obstacle radius must be positive, got {self.radius}")

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    @property
    def velocity(self) -> tuple[float, float]:
        return (self.vx, self.vy)


@dataclass(frozen=True)
class SafetyGeometry:
    """Robot footprint radius and the extra clearance margin."""

    robot_radius: float = 0.35
    margin: float = 0.10

    def __post_init__(self):
        if not self.robot_radius > 0:
            raise ValueError("robot_radius must be positive")
        if not self.margin >= 0:
            raise ValueError("margin must be non-negative")

    def effective_radius(self, obstacle_radius: float) -> float:
        return obstacle_radius + self.robot_radius + self.margin
