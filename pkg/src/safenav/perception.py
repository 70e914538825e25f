"""Simulated obstacle sensing, constant-velocity tracking and one-step prediction.

Association is by ground-truth obstacle id; the filter state is
``[p_x, p_y, v_x, v_y]`` and both position and velocity are measured.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .randomization import RandomizationProfile
from .rand_core import SeededStream, uniform
from .state import ObstacleDisk, RobotState, wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObstacleObservation:
    id: int
    position: tuple[float, float] | None
    velocity: tuple[float, float] | None
    radius: float
    valid: bool = True
    held: bool = False

    def __post_init__(self):
        if not self.valid and (self.position is not None or self.velocity is not None):
            raise ValueError("an invalid observation carries no position or velocity")


@dataclass(frozen=True)
class PredictedObstacle(ObstacleDisk):
    id: int = -1

    def as_disk(self) -> ObstacleDisk:
        return ObstacleDisk(self.x, self.y, self.vx, self.vy, self.radius)


class Observer:
    """Adds per-axis uniform noise and frame dropouts to ground truth.

    A dropout repeats the last emitted valid frame, flagged ``held``, for
    1-3 consecutive steps. At least one fresh frame separates two dropouts,
    so a held run never exceeds the drawn length.
    """

    def __init__(self, profile: RandomizationProfile, rng: SeededStream):
        self.profile = profile
        self.rng = rng
        self._hold_left = 0
        self._fresh = True  # last emitted frame was a measurement
        self._last: list[ObstacleObservation] = []

    def observe(self, obstacles: list[tuple[int, ObstacleDisk]], robot: RobotState):
        pr, rng = self.profile, self.rng
        robot_meas = RobotState(
            robot.x + uniform(rng, *pr.base_position_noise),
            robot.y + uniform(rng, *pr.base_position_noise),
            wrap_angle(robot.theta + math.radians(uniform(rng, *pr.base_yaw_noise))),
            robot.vx + uniform(rng, *pr.base_linear_velocity_noise),
            robot.vy + uniform(rng, *pr.base_linear_velocity_noise),
            robot.omega + uniform(rng, *pr.base_angular_velocity_noise),
            robot.roll,
            robot.pitch,
        )
        if (self._hold_left == 0 and self._fresh and pr.dropout_probability > 0
                and rng.random() < pr.dropout_probability):
            self._hold_left = rng.integers(*pr.dropout_hold_steps)
        if self._hold_left > 0:
            self._hold_left -= 1
            self._fresh = False
            live = {o[0] for o in obstacles}
            held = [ObstacleObservation(o.id, o.position, o.velocity, o.radius, True, True)
                    for o in self._last if o.id in live]
            seen = {o.id for o in held}
            held += [ObstacleObservation(i, None, None, o.radius, valid=False)
                     for i, o in obstacles if i not in seen]
            return held, robot_meas
        frame = []
        for i, o in obstacles:
            frame.append(ObstacleObservation(
                i,
                (o.x + uniform(rng, *pr.obstacle_position_noise),
                 o.y + uniform(rng, *pr.obstacle_position_noise)),
                (o.vx + uniform(rng, *pr.obstacle_velocity_noise),
                 o.vy + uniform(rng, *pr.obstacle_velocity_noise)),
                o.radius,
            ))
        self._last = frame
        self._fresh = True
        return frame, robot_meas


def observe(obstacles, robot: RobotState, rng: SeededStream, profile: RandomizationProfile,
            observer: Observer | None = None):
    """One sensing step; pass a persistent ``observer`` to carry dropout state."""
    if observer is None:
        observer = Observer(profile, rng)
    return observer.observe(obstacles, robot)


@dataclass(frozen=True)
class FilterNoise:
    """Process noise (acceleration std) and measurement stds of the CV filter."""

    accel_std: float = 0.5
    position_std: float = RandomizationProfile.std_of((-0.05, 0.05))
    velocity_std: float = RandomizationProfile.std_of((-0.20, 0.20))
    prior_position_std: float = 0.5
    prior_velocity_std: float = 2.0

    @classmethod
    def from_profile(cls, profile: RandomizationProfile, accel_std: float = 0.5) -> "FilterNoise":
        return cls(accel_std, RandomizationProfile.std_of(profile.obstacle_position_noise),
                   RandomizationProfile.std_of(profile.obstacle_velocity_noise))

    def measurement_cov(self) -> np.ndarray:
        p, v = self.position_std ** 2, self.velocity_std ** 2
        return np.diag([p, p, v, v])

    def process_cov(self, dt: float) -> np.ndarray:
        q = self.accel_std ** 2
        a, b, c = dt ** 4 / 4, dt ** 3 / 2, dt ** 2
        return q * np.array([[a, 0, b, 0], [0, a, 0, b], [b, 0, c, 0], [0, b, 0, c]])

    def prior_cov(self) -> np.ndarray:
        p, v = self.prior_position_std ** 2, self.prior_velocity_std ** 2
        return np.diag([p, p, v, v])


@dataclass(frozen=True)
class ObstacleTrack:
    id: int
    mean: np.ndarray  # [px, py, vx, vy]
    cov: np.ndarray  # 4x4
    last_update: int
    radius: float


def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def init_track(obs: ObstacleObservation, step: int, noise: FilterNoise) -> ObstacleTrack:
    if not obs.valid:
        raise ValueError("cannot start a track from an invalid observation")
    mean = np.array([*obs.position, *obs.velocity], dtype=float)
    return ObstacleTrack(obs.id, mean, noise.measurement_cov(), step, obs.radius)


def _is_psd(P: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(P))) and float(np.linalg.eigvalsh(P)[0]) >= -1e-9


def track_update(track: ObstacleTrack, obs: ObstacleObservation | None, dt: float,
                 noise: FilterNoise = FilterNoise(), step: int | None = None) -> ObstacleTrack:
    """Constant-velocity predict, then update on position and velocity.

    Held (dropout) or missing observations skip the correction.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    F = transition(dt)
    x = F @ track.mean
    P = F @ track.cov @ F.T + noise.process_cov(dt)
    last = track.last_update
    if obs is not None and obs.valid and not obs.held:
        z = np.array([*obs.position, *obs.velocity], dtype=float)
        R = noise.measurement_cov()
        S = P + R
        try:
            K = np.linalg.solve(S.T, P.T).T
        except np.linalg.LinAlgError:
            K = P @ np.linalg.pinv(S)
        x = x + K @ (z - x)
        IK = np.eye(4) - K
        P = IK @ P @ IK.T + K @ R @ K.T
        last = track.last_update + 1 if step is None else step
    P = 0.5 * (P + P.T)
    if not _is_psd(P):
        log.warning("track %d covariance lost PSD; resetting to prior", track.id)
        P = noise.prior_cov()
    return ObstacleTrack(track.id, x, P, last, track.radius)


def predict_one_step(track: ObstacleTrack, dt: float) -> PredictedObstacle:
    """Constant-velocity extrapolation of the filtered state by ``dt``."""
    px, py, vx, vy = (float(v) for v in track.mean)
    return PredictedObstacle(px + vx * dt, py + vy * dt, vx, vy, track.radius, track.id)


def hold_latest(track: ObstacleTrack) -> PredictedObstacle:
    """Latest filtered state, not propagated (prediction disabled)."""
    px, py, vx, vy = (float(v) for v in track.mean)
    return PredictedObstacle(px, py, vx, vy, track.radius, track.id)


class _AxisTrack:
    """Per-episode fast path: x and y share one 2x2 (position, velocity) covariance.

    With identity measurement of position and velocity and identical noise
    on both axes, the 4x4 filter decouples into two axes with the same
    covariance, so this is an exact rewrite of :func:`track_update`.
    """

    __slots__ = ("id", "px", "py", "vx", "vy", "P", "last_update", "radius", "posterior")

    def __init__(self, obs: ObstacleObservation, step: int, noise: FilterNoise):
        self.id = obs.id
        self.px, self.py = obs.position
        self.vx, self.vy = obs.velocity
        self.P = [noise.position_std ** 2, 0.0, noise.velocity_std ** 2]  # (pp, pv, vv)
        self.last_update = step
        self.radius = obs.radius
        self.posterior = (self.px, self.py, self.vx, self.vy)

    def update(self, obs: ObstacleObservation, dt: float, noise: FilterNoise, step: int) -> None:
        pp, pv, vv = self.P
        q = noise.accel_std ** 2
        pp = pp + 2 * dt * pv + dt * dt * vv + q * dt ** 4 / 4
        pv = pv + dt * vv + q * dt ** 3 / 2
        vv = vv + q * dt * dt
        self.px += self.vx * dt
        self.py += self.vy * dt
        if obs.valid and not obs.held:
            rp, rv = noise.position_std ** 2, noise.velocity_std ** 2
            s00, s01, s11 = pp + rp, pv, vv + rv
            det = s00 * s11 - s01 * s01
            # K = P S^-1
            k00 = (pp * s11 - pv * s01) / det
            k01 = (pv * s00 - pp * s01) / det
            k10 = (pv * s11 - vv * s01) / det
            k11 = (vv * s00 - pv * s01) / det
            ex, ey = obs.position[0] - self.px, obs.position[1] - self.py
            evx, evy = obs.velocity[0] - self.vx, obs.velocity[1] - self.vy
            self.px += k00 * ex + k01 * evx
            self.vx += k10 * ex + k11 * evx
            self.py += k00 * ey + k01 * evy
            self.vy += k10 * ey + k11 * evy
            # Joseph form (I - K) P (I - K)^T + K R K^T
            a, b, c, d = 1 - k00, -k01, -k10, 1 - k11
            m00 = a * pp + b * pv
            m01 = a * pv + b * vv
            m10 = c * pp + d * pv
            m11 = c * pv + d * vv
            npp = m00 * a + m01 * b + k00 * k00 * rp + k01 * k01 * rv
            npv = m00 * c + m01 * d + k00 * k10 * rp + k01 * k11 * rv
            nvv = m10 * c + m11 * d + k10 * k10 * rp + k11 * k11 * rv
            pp, pv, vv = npp, npv, nvv
            self.last_update = step
            self.posterior = (self.px, self.py, self.vx, self.vy)
        if not (pp >= -1e-9 and vv >= -1e-9 and pp * vv - pv * pv >= -1e-9 and math.isfinite(pp + pv + vv)):
            log.warning("track %d covariance lost PSD; resetting to prior", self.id)
            pp, pv, vv = noise.prior_position_std ** 2, 0.0, noise.prior_velocity_std ** 2
        self.P = [pp, pv, vv]

    def as_track(self) -> ObstacleTrack:
        pp, pv, vv = self.P
        cov = np.array([[pp, 0, pv, 0], [0, pp, 0, pv], [pv, 0, vv, 0], [0, pv, 0, vv]], dtype=float)
        return ObstacleTrack(self.id, np.array([self.px, self.py, self.vx, self.vy]), cov,
                             self.last_update, self.radius)


class Tracker:
    """Per-episode set of tracks keyed by obstacle id."""

    def __init__(self, noise: FilterNoise):
        self.noise = noise
        self._tracks: dict[int, _AxisTrack] = {}

    @property
    def tracks(self) -> dict[int, ObstacleTrack]:
        return {i: t.as_track() for i, t in self._tracks.items()}

    def update(self, observations: list[ObstacleObservation], dt: float, step: int) -> None:
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        present = set()
        for obs in observations:
            present.add(obs.id)
            tr = self._tracks.get(obs.id)
            if tr is None:
                if obs.valid:
                    self._tracks[obs.id] = _AxisTrack(obs, step, self.noise)
                continue
            tr.update(obs, dt, self.noise, step)
        for gone in [i for i in self._tracks if i not in present]:
            del self._tracks[gone]

    def predictions(self, dt: float, hold: bool = False) -> list[PredictedObstacle]:
        """One-step predictions, or with ``hold`` the state from the last measurement correction.

        Holding means no propagation at all: during dropouts the held state
        does not coast forward either.
        """
        out = []
        for i in sorted(self._tracks):
            t = self._tracks[i]
            if hold:
                px, py, vx, vy = t.posterior
                out.append(PredictedObstacle(px, py, vx, vy, t.radius, t.id))
            else:
                out.append(PredictedObstacle(t.px + t.vx * dt, t.py + t.vy * dt, t.vx, t.vy, t.radius, t.id))
        return out
