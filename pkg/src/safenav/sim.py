"""Planar kinematic simulation and the per-episode closed control loop."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Any

from .controllers import (NavConfig, ReflexConfig, RewardGains, effort_proxy, nav_command, nav_reward,
                          reflex_command, reflex_reward, select_threat)
from .fields import PassabilityField, build_passability_field, load_map, map_from_dict, phi_dyn, phi_env_at
from .handoff import HandoffConfig, HandoffState, fuse, handoff_rewards, hard_switch
from .perception import FilterNoise, Observer, Tracker
from .planner import Goal, Planner, PlannerConfig, static_shortest_length
from .rand_core import SeededStream, derive, uniform
from .randomization import RandomizationProfile
from .shield import build_safe_set, eval_h_env, project_safe
from .state import (ActuationBox, Command, ObstacleDisk, RobotState, SafetyGeometry, ZERO_COMMAND,
                    body_to_world, wrap_angle)

log = logging.getLogger(__name__)

VARIANTS = ("full", "hard_handoff", "no_cbf", "no_pred")
TERMINATIONS = ("static_collision", "dynamic_collision", "fall", "goal", "horizon", "error")


# ---------------------------------------------------------------------------
# robot and obstacle kinematics


@dataclass(frozen=True)
class TiltModel:
    """First-order roll/pitch proxy driven by roughness and tracking error."""

    tau: float = 0.15
    terrain_gain: float = 0.3
    accel_gain: float = 0.2
    mix: tuple[float, float] = (0.6, 0.8)  # unit vector splitting roughness into (roll, pitch)
    fall_limit: float = 0.6


def step_robot(s: RobotState, u: Command, dt: float, tau: float = 0.1, friction: float = 1.0,
               roughness: float = 0.0, box: ActuationBox = ActuationBox(),
               tilt: TiltModel = TiltModel()) -> RobotState:
    """Lagged velocity tracking, then pose integration with the new body velocity."""
    vals = (s.x, s.y, s.theta, s.vx, s.vy, s.omega, s.roll, s.pitch, *u, dt, tau, friction, roughness)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("step_robot received a non-finite input")
    if not dt > 0 or not tau > 0 or not friction > 0:
        raise ValueError("dt, tau and friction must be positive")
    uc = box.clamp(Command(*u))
    k = min(1.0, dt * friction / tau)
    ex, ey = uc.vx - s.vx, uc.vy - s.vy
    vx = s.vx + k * ex
    vy = s.vy + k * ey
    om = s.omega + k * (uc.omega - s.omega)
    wx, wy = body_to_world(s.theta, vx, vy)
    kt = min(1.0, dt / tilt.tau)
    r_target = tilt.terrain_gain * roughness * tilt.mix[0] + tilt.accel_gain * ey
    p_target = tilt.terrain_gain * roughness * tilt.mix[1] + tilt.accel_gain * ex
    return RobotState(
        s.x + wx * dt,
        s.y + wy * dt,
        wrap_angle(s.theta + om * dt),
        vx, vy, om,
        s.roll + kt * (r_target - s.roll),
        s.pitch + kt * (p_target - s.pitch),
    )


def step_obstacle(o: ObstacleDisk, dt: float) -> ObstacleDisk:
    """Constant-velocity integration; aimed obstacles fix their velocity at spawn."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return ObstacleDisk(o.x + o.vx * dt, o.y + o.vy * dt, o.vx, o.vy, o.radius)


class SpawnError(RuntimeError):
    pass


def spawn_attack(rng: SeededStream, profile: RandomizationProfile, robot: RobotState,
                 radii: tuple[float, ...] = (0.12,), geom: SafetyGeometry = SafetyGeometry(),
                 mode: str = "aimed", min_distance: float = 0.0, max_tries: int = 100) -> ObstacleDisk:
    """Offset uniformly in a box around the robot, speed uniform, aimed at the robot.

    Offsets whose obstacle disk overlaps the robot disk (or lies closer than
    ``min_distance``) are redrawn. In ``constant`` mode the heading is
    uniform instead of aimed.
    """
    if mode not in ("aimed", "constant"):
        raise ValueError(f"unknown attack mode {mode!r}")
    lo, hi = profile.obstacle_initial_position
    r = rng.choice(radii) if len(radii) > 1 else radii[0]
    for _ in range(max_tries):
        dx = uniform(rng, lo, hi)
        dy = uniform(rng, lo, hi)
        d = math.hypot(dx, dy)
        if d > r + geom.robot_radius and d >= min_distance:
            break
    else:
        raise SpawnError(f"no valid spawn offset after {max_tries} tries")
    speed = uniform(rng, *profile.obstacle_speed)
    if mode == "aimed":
        hx, hy = -dx / d, -dy / d
    else:
        a = uniform(rng, -math.pi, math.pi)
        hx, hy = math.cos(a), math.sin(a)
    return ObstacleDisk(robot.x + dx, robot.y + dy, speed * hx, speed * hy, r)


class LatencyBuffer:
    """FIFO that releases each command ``delay`` steps after it is pushed."""

    def __init__(self, delay: int):
        if delay < 0:
            raise ValueError("delay must be non-negative")
        self.delay = delay
        self._q = deque([ZERO_COMMAND] * delay)

    def push(self, u: Command) -> Command:
        if self.delay == 0:
            return u
        self._q.append(u)
        return self._q.popleft()


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class AttackSchedule:
    count: int = 0
    times: tuple[float, ...] = ()  # explicit spawn times (s); sampled in ``window`` when empty
    window: tuple[float, float] = (1.0, 5.0)
    mode: str = "aimed"
    radii: tuple[float, ...] = (0.12,)
    min_distance: float = 1.0
    lifetime: float = 3.0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("attack count must be non-negative")
        if self.times and len(self.times) != self.count:
            raise ValueError("attack times must list exactly `count` entries")
        if self.mode not in ("aimed", "constant"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if not self.radii or min(self.radii) <= 0:
            raise ValueError("attack radii must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    map_path: str | None = None
    map_data: dict | None = None
    start: tuple[float, float, float] = (1.0, 1.0, 0.0)
    start_jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)  # half-widths (m, m, rad)
    goal: Goal = Goal(5.0, 1.0, 0.3)
    horizon: float = 20.0
    dt: float = 0.02
    attacks: AttackSchedule = AttackSchedule()
    profile: RandomizationProfile = RandomizationProfile()
    variant: str = "full"
    geometry: SafetyGeometry = SafetyGeometry()
    box: ActuationBox = ActuationBox()
    tau: float = 0.1
    tilt: TiltModel = TiltModel()
    roughness_limit: float = 1.0
    slope_limit: float = 0.5
    cbf_alpha: float = 2.0
    i_star_only: bool = False
    hard_switch_threshold: float = 0.5
    stop_on_dynamic_collision: bool = True
    nav: NavConfig = NavConfig()
    reflex: ReflexConfig = ReflexConfig()
    handoff: HandoffConfig = HandoffConfig()
    planner: PlannerConfig = dc_field(default_factory=PlannerConfig)
    rewards: RewardGains = RewardGains()
    filter_accel_std: float = 0.5
    name: str = "scenario"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if (self.map_path is None) == (self.map_data is None):
            raise ValueError("give exactly one of map_path or map_data")

    def with_variant(self, variant: str) -> "ScenarioConfig":
        return replace(self, variant=variant)

    def load_grid(self):
        if self.map_data is not None:
            return map_from_dict(self.map_data)
        return load_map(self.map_path)


def _tuple(v):
    return tuple(_tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v


def _sub(cls, d: dict | None, name: str):
    if d is None:
        return cls()
    try:
        return cls(**{k: _tuple(v) for k, v in d.items()})
    except TypeError as e:
        raise ValueError(f"bad {name!r} section: {e}") from None


def scenario_from_dict(d: dict, base_dir: str | Path | None = None) -> ScenarioConfig:
    d = dict(d)
    known = {f for f in ScenarioConfig.__dataclass_fields__} | {"map", "randomization"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    kw: dict[str, Any] = {}
    m = d.pop("map", None)
    if isinstance(m, dict):
        kw["map_data"] = m
    elif isinstance(m, str):
        p = Path(m)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        kw["map_path"] = str(p)
    elif m is not None:
        raise ValueError("map must be a file path or an inline map object")
    if "goal" in d:
        kw["goal"] = Goal(**d.pop("goal"))
    rnd = d.pop("randomization", None)
    if rnd is not None:
        rnd = dict(rnd)
        exact = rnd.pop("exact", False)
        prof = RandomizationProfile.from_dict(rnd)
        if exact:
            prof = RandomizationProfile.exact(**{k: getattr(prof, k) for k in rnd})
        kw["profile"] = prof
    sections = {"attacks": AttackSchedule, "geometry": SafetyGeometry, "box": ActuationBox, "tilt": TiltModel,
                "nav": NavConfig, "reflex": ReflexConfig, "handoff": HandoffConfig, "planner": PlannerConfig,
                "rewards": RewardGains}
    for k, cls in sections.items():
        if k in d:
            kw[k] = _sub(cls, d.pop(k), k)
    for k, v in d.items():
        kw[k] = _tuple(v)
    return ScenarioConfig(**kw)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"cannot read scenario {path}: {e}") from None
    d.setdefault("name", path.stem)
    cfg = scenario_from_dict(d, path.parent)
    if cfg.map_path is not None and not Path(cfg.map_path).exists():
        raise ValueError(f"scenario {path}: map file {cfg.map_path} not found")
    return cfg


_FIELD_CACHE: dict = {}


def field_for(cfg: ScenarioConfig) -> PassabilityField:
    """Passability field for a scenario, cached per process (read-only after build)."""
    key = (cfg.map_path, None if cfg.map_data is None else id(cfg.map_data), cfg.geometry,
           cfg.roughness_limit, cfg.slope_limit)
    f = _FIELD_CACHE.get(key)
    if f is None:
        f = build_passability_field(cfg.load_grid(), cfg.geometry, cfg.roughness_limit, cfg.slope_limit)
        if len(_FIELD_CACHE) > 16:
            _FIELD_CACHE.clear()
        _FIELD_CACHE[key] = f
    return f


# ---------------------------------------------------------------------------
# episode log

STEP_COLUMNS = (
    "step", "t", "x", "y", "theta", "vx", "vy", "omega", "roll", "pitch",
    "nav_vx", "nav_vy", "nav_omega", "refl_vx", "refl_vy", "refl_omega",
    "fuse_vx", "fuse_vy", "fuse_omega", "safe_vx", "safe_vy", "safe_omega",
    "applied_vx", "applied_vy", "applied_omega",
    "shield_status", "threat", "threat_index", "phi_env", "phi_dyn_min", "h_env", "n_obstacles",
    "r_nav", "r_refl", "r_handoff",
)


@dataclass
class EpisodeLog:
    """Per-episode outcome, metric accumulators and (optionally) per-step rows."""

    seed: int
    variant: str
    scenario: str = ""
    termination: str = "horizon"
    goal: bool = False
    static_collision: bool = False
    dynamic_collision: bool = False
    fall: bool = False
    steps: int = 0
    L_act: float = 0.0
    L_stat: float = math.inf
    d_min: float = math.inf
    d0: float = 0.0
    sum_goal_dist: float = 0.0
    sum_tilt_sq: float = 0.0
    sum_du_sq: float = 0.0
    max_dfuse: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rate_violations: int = 0
    onset_steps: int = 0
    onset_violations: int = 0
    shield_counts: dict = dc_field(default_factory=dict)
    friction: float = 1.0
    latency_steps: int = 0
    error: str = ""
    rows: list | None = None
    obstacle_rows: list | None = None

    @property
    def avoided(self) -> bool:
        return not self.dynamic_collision

    @property
    def success(self) -> bool:
        return self.goal and self.avoided

    @property
    def PE(self) -> float | None:
        if not self.success or not self.L_act > 0 or not math.isfinite(self.L_stat):
            return None
        return self.L_stat / self.L_act

    def LC(self, weights=(1 / 3, 1 / 3, 1 / 3), theta0: float = 0.3, u0: float = 1.0) -> float | None:
        if self.steps == 0 or not self.d0 > 0:
            return None
        wg, ws, wc = weights
        return (wg * self.sum_goal_dist / self.d0 + ws * self.sum_tilt_sq / theta0 ** 2
                + wc * self.sum_du_sq / u0 ** 2) / self.steps

    def step_csv(self) -> str:
        if self.rows is None:
            raise ValueError("episode was run without step recording")
        lines = [",".join(STEP_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in r))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# episode loop


def _noisy_start(cfg: ScenarioConfig, rng: SeededStream) -> RobotState:
    jx, jy, jt = cfg.start_jitter
    return RobotState(cfg.start[0] + uniform(rng, -jx, jx), cfg.start[1] + uniform(rng, -jy, jy),
                      wrap_angle(cfg.start[2] + uniform(rng, -jt, jt)))


def _spawn_times(cfg: ScenarioConfig, rng: SeededStream) -> list[float]:
    a = cfg.attacks
    if a.times:
        return sorted(a.times)
    return sorted(uniform(rng, *a.window) for _ in range(a.count))


def run_episode(cfg: ScenarioConfig, seed: int, variant: str | None = None, record: bool = False,
                field: PassabilityField | None = None) -> EpisodeLog:
    """One closed-loop episode; failures are reported in the log, never raised."""
    variant = cfg.variant if variant is None else variant
    out = EpisodeLog(seed, variant, cfg.name)
    try:
        _run(cfg, seed, variant, record, field, out)
    except Exception as e:  # noqa: BLE001 - any module failure ends the episode, not the batch
        log.warning("episode seed=%d variant=%s failed: %s", seed, variant, e)
        out.termination = "error"
        out.goal = False
        out.error = f"{type(e).__name__}: {e}"
    return out


def _run(cfg: ScenarioConfig, seed: int, variant: str, record: bool, field: PassabilityField | None,
         out: EpisodeLog) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    field = field_for(cfg) if field is None else field
    geom, box, dt, goal = cfg.geometry, cfg.box, cfg.dt, cfg.goal
    prof = cfg.profile

    dom = derive(seed, "domain")
    friction = uniform(dom, *prof.friction_factor)
    latency = uniform(dom, *prof.latency)
    out.friction = friction
    out.latency_steps = int(round(latency / dt))
    spawn_rng = derive(seed, "spawn")
    observer = Observer(prof, derive(seed, "observe"))
    robot = _noisy_start(cfg, derive(seed, "start"))

    tracker = Tracker(FilterNoise.from_profile(prof, cfg.filter_accel_std))
    planner = Planner(field, goal, geom, cfg.planner)
    handoff = HandoffState()
    delay = LatencyBuffer(out.latency_steps)
    spawn_at = [int(round(t / dt)) for t in _spawn_times(cfg, spawn_rng)]
    lifetime_steps = int(round(cfg.attacks.lifetime / dt))
    obstacles: dict[int, tuple[ObstacleDisk, int]] = {}  # id -> (disk, spawn step)
    next_id = 0

    out.L_stat = max(static_shortest_length(field, robot.position, goal.center) - goal.radius, 0.0)
    out.d0 = math.hypot(robot.x - goal.x, robot.y - goal.y)
    rows = [] if record else None
    obstacle_rows = [] if record else None
    counts = {"passthrough": 0, "filtered": 0, "relaxed": 0, "emergency": 0, "bypass": 0}
    prev_fuse = ZERO_COMMAND
    prev_applied = ZERO_COMMAND
    prev_T = 0.0
    limits = cfg.handoff.rate_limits
    max_df = [0.0, 0.0, 0.0]
    n_steps = int(round(cfg.horizon / dt))
    termination = "horizon"
    hold = variant == "no_pred"
    use_shield = variant != "no_cbf"
    hard = variant == "hard_handoff"

    for k in range(n_steps):
        # obstacles: spawn, expire
        while spawn_at and spawn_at[0] <= k:
            spawn_at.pop(0)
            o = spawn_attack(spawn_rng, prof, robot, cfg.attacks.radii, geom, cfg.attacks.mode,
                             cfg.attacks.min_distance)
            obstacles[next_id] = (o, k)
            next_id += 1
        for i in [i for i, (_, k0) in obstacles.items() if k - k0 > lifetime_steps]:
            del obstacles[i]
        truth = [(i, obstacles[i][0]) for i in sorted(obstacles)]

        # sense, track, predict
        frame, robot_meas = observer.observe(truth, robot)
        tracker.update(frame, dt, k)
        preds = tracker.predictions(dt, hold=hold)

        # plan and command
        plan = planner.tick(k, robot_meas, preds)
        u_nav = nav_command(robot_meas, plan.path, goal, field, cfg.nav, box)
        i_thr = select_threat(robot_meas, preds, geom)
        u_refl = ZERO_COMMAND
        if i_thr is not None:
            u_refl = reflex_command(robot_meas, preds[i_thr], field, geom, cfg.reflex, box)
        T = plan.threat.value
        if hard:
            u_fuse = hard_switch(u_nav, u_refl, T, cfg.hard_switch_threshold)
            handoff = HandoffState(u_fuse)
        else:
            u_fuse, handoff = fuse(u_nav, u_refl, T, handoff, cfg.handoff)

        if use_shield:
            sset = build_safe_set(robot_meas, field, preds, geom, cfg.cbf_alpha, box,
                                  plan.threat.index if plan.threat.index is not None else i_thr, cfg.i_star_only)
            res = project_safe(u_fuse, sset)
            u_safe, status = res.u, res.status
        else:
            u_safe, status = u_fuse, "bypass"
        counts[status] += 1
        applied = delay.push(u_safe)

        # fusion smoothness bookkeeping
        df = [abs(a - b) for a, b in zip(u_fuse, prev_fuse)]
        violated = any(d > lim + 1e-12 for d, lim in zip(df, limits))
        for j in range(3):
            if df[j] > max_df[j]:
                max_df[j] = df[j]
        out.rate_violations += violated
        if prev_T < 0.5 <= T:
            out.onset_steps += 1
            out.onset_violations += violated
        prev_T = T

        # advance world
        rough = field.roughness_at(robot.position)
        new_robot = step_robot(robot, applied, dt, cfg.tau, friction, rough, box, cfg.tilt)
        obstacles = {i: (step_obstacle(o, dt), k0) for i, (o, k0) in obstacles.items()}

        # metrics
        out.L_act += math.hypot(new_robot.x - robot.x, new_robot.y - robot.y)
        d_goal = math.hypot(new_robot.x - goal.x, new_robot.y - goal.y)
        out.sum_goal_dist += d_goal
        out.sum_tilt_sq += new_robot.tilt_sq()
        du = applied - prev_applied
        out.sum_du_sq += du.vx ** 2 + du.vy ** 2 + du.omega ** 2
        out.steps = k + 1
        env = phi_env_at(field, new_robot.position)
        dyn_min = math.inf
        hit = False
        for i in sorted(obstacles):
            o = obstacles[i][0]
            m = phi_dyn(new_robot.position, o, geom)
            if m < dyn_min:
                dyn_min = m
            if math.hypot(new_robot.x - o.x, new_robot.y - o.y) <= o.radius + geom.robot_radius:
                hit = True
        if dyn_min < out.d_min:
            out.d_min = dyn_min

        if record:
            eff = effort_proxy(new_robot.body_velocity, applied, cfg.tau)
            r_nav = nav_reward(robot, new_robot, plan.path, eff, cfg.rewards).total
            thr = preds[i_thr].as_disk() if i_thr is not None else None
            r_refl = reflex_reward(new_robot, thr, eff, geom, cfg.rewards).total
            r_ho = handoff_rewards(u_fuse, u_nav, u_refl, T, u_fuse - prev_fuse, new_robot.tilt_sq(),
                                   cfg.handoff).total
            h_env = eval_h_env(robot_meas, field).h
            rows.append((k, (k + 1) * dt, new_robot.x, new_robot.y, new_robot.theta, new_robot.vx, new_robot.vy,
                         new_robot.omega, new_robot.roll, new_robot.pitch, *u_nav, *u_refl, *u_fuse, *u_safe,
                         *applied, status, T, -1 if i_thr is None else i_thr, env, dyn_min, h_env, len(obstacles),
                         r_nav, r_refl, r_ho))
            for i in sorted(obstacles):
                o = obstacles[i][0]
                obstacle_rows.append((k, i, o.x, o.y, o.vx, o.vy, o.radius))

        prev_fuse = u_fuse
        prev_applied = applied
        robot = new_robot

        if env < 0.0:
            out.static_collision = True
            termination = "static_collision"
        if hit:
            out.dynamic_collision = True
            if termination == "horizon":
                termination = "dynamic_collision"
        if abs(robot.roll) > cfg.tilt.fall_limit or abs(robot.pitch) > cfg.tilt.fall_limit:
            out.fall = True
            if termination == "horizon":
                termination = "fall"
        if termination == "horizon" and goal.contains(robot.position):
            termination = "goal"
        if termination != "horizon" and (termination != "dynamic_collision" or cfg.stop_on_dynamic_collision):
            break
        if termination == "dynamic_collision":
            termination = "horizon"  # keep driving; the collision flag stays set

    out.termination = termination
    out.goal = termination == "goal"
    out.max_dfuse = tuple(max_df)
    out.shield_counts = counts
    out.rows = rows
    out.obstacle_rows = obstacle_rows
