"""Multi-rate reference-path planner and threat scoring.

The slow loop regenerates a small family of candidate paths (the static
shortest path plus lateral offsets of it), drops infeasible ones and keeps the
best-scoring path. The fast loop recomputes the threat score every control
step from one-step obstacle predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .fields import PassabilityField, phi_dyn
from .state import ObstacleDisk, RobotState, SafetyGeometry

DS_MAX = 0.1


@dataclass(frozen=True)
class Goal:
    x: float
    y: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("goal radius must be positive")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x, self.y)

    def contains(self, p) -> bool:
        return math.hypot(p[0] - self.x, p[1] - self.y) <= self.radius


class ReferencePath:
    """Polyline with cumulative arc length and per-waypoint tangent heading."""

    def __init__(self, points, ds_max: float = DS_MAX):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            raise ValueError("a path needs at least one waypoint")
        if len(pts) > 1:
            seg = pts[1:] - pts[:-1]
            L = np.hypot(seg[:, 0], seg[:, 1])
            if np.any(L <= 1e-9):
                pts = pts[np.concatenate([[True], L > 1e-9])]
                seg = pts[1:] - pts[:-1]
                L = np.hypot(seg[:, 0], seg[:, 1])
            if len(pts) > 1 and L.max() > ds_max:
                n_sub = np.maximum(np.ceil(L / ds_max - 1e-9), 1).astype(int)
                owner = np.repeat(np.arange(len(seg)), n_sub)
                first = np.cumsum(n_sub) - n_sub
                t = (np.arange(len(owner)) - first[owner] + 1) / n_sub[owner]
                pts = np.vstack([pts[:1], pts[owner] + t[:, None] * seg[owner]])
                seg = pts[1:] - pts[:-1]
                L = np.hypot(seg[:, 0], seg[:, 1])
        self.points = pts
        if len(pts) > 1:
            self.s = np.concatenate([[0.0], np.cumsum(L)])
            h = np.arctan2(seg[:, 1], seg[:, 0])
            self.headings = np.concatenate([h, h[-1:]])
        else:
            self.s = np.zeros(1)
            self.headings = np.zeros(1)
        self._env_cache = None

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def env_margins(self, field: PassabilityField) -> np.ndarray:
        """``phi_env`` at every waypoint, cached per field."""
        c = self._env_cache
        if c is None or c[0] is not field:
            c = self._env_cache = (field, field.phi_env_many(self.points))
        return c[1]

    def __len__(self):
        return len(self.points)

    @property
    def start(self) -> tuple[float, float]:
        return (float(self.points[0, 0]), float(self.points[0, 1]))

    def point_at(self, s: float) -> tuple[float, float]:
        s = min(max(s, 0.0), self.length)
        return (float(np.interp(s, self.s, self.points[:, 0])),
                float(np.interp(s, self.s, self.points[:, 1])))

    def heading_at(self, s: float) -> float:
        if len(self.points) == 1:
            return float(self.headings[0])
        k = int(np.searchsorted(self.s, s, side="right")) - 1
        return float(self.headings[min(max(k, 0), len(self.headings) - 2)])

    def turning(self) -> float:
        """Total absolute heading change along the path (rad)."""
        if len(self.points) < 3:
            return 0.0
        h = self.headings[:-1]
        dh = np.remainder(h[1:] - h[:-1] + np.pi, 2 * np.pi) - np.pi
        return float(np.abs(dh).sum())


# ---------------------------------------------------------------------------
# static shortest paths


class StaticRoutes:
    """Cost-to-goal over feasible cells for one (field, goal cell) pair.

    8-connected grid, diagonal moves only when both adjacent orthogonal cells
    are feasible. Paths are shortcut by line of sight inside ``phi_env > 0``.
    """

    def __init__(self, field: PassabilityField, goal: tuple[float, float]):
        self.field = field
        grid = field.grid
        self.goal = (float(goal[0]), float(goal[1]))
        self.goal_cell = grid.cell_of(goal)
        h, w = grid.height, grid.width
        feas = field.feasible
        idx = np.arange(h * w).reshape(h, w)
        res = grid.resolution
        rows, cols, wts = [], [], []

        def link(a_mask, a_idx, b_idx, cost):
            rows.append(a_idx[a_mask])
            cols.append(b_idx[a_mask])
            wts.append(np.full(int(a_mask.sum()), cost))

        link(feas[:, :-1] & feas[:, 1:], idx[:, :-1], idx[:, 1:], res)
        link(feas[:-1, :] & feas[1:, :], idx[:-1, :], idx[1:, :], res)
        d = res * math.sqrt(2.0)
        diag = feas[:-1, :-1] & feas[1:, 1:] & feas[:-1, 1:] & feas[1:, :-1]
        link(diag, idx[:-1, :-1], idx[1:, 1:], d)
        link(diag, idx[:-1, 1:], idx[1:, :-1], d)
        r = np.concatenate(rows) if rows else np.zeros(0, int)
        c = np.concatenate(cols) if cols else np.zeros(0, int)
        v = np.concatenate(wts) if wts else np.zeros(0)
        graph = coo_matrix((np.concatenate([v, v]), (np.concatenate([r, c]), np.concatenate([c, r]))),
                           shape=(h * w, h * w)).tocsr()
        gj, gi = self.goal_cell
        self.goal_node = gj * w + gi
        self.reachable_goal = bool(feas[gj, gi])
        if self.reachable_goal:
            dist, pred = dijkstra(graph, directed=False, indices=self.goal_node, return_predecessors=True)
        else:
            dist = np.full(h * w, np.inf)
            pred = np.full(h * w, -9999)
        self.cost_to_goal = dist
        self.next_node = pred
        self._reach_idx = np.flatnonzero(np.isfinite(dist))
        X, Y = grid.cell_centers()
        self._cx = X.ravel()
        self._cy = Y.ravel()
        self._pulled: dict[int, np.ndarray] = {}

    def grid_distance(self, p) -> float:
        """Dijkstra cost from the cell containing ``p`` to the goal cell."""
        j, i = self.field.grid.cell_of(p)
        return float(self.cost_to_goal[j * self.field.grid.width + i])

    def start_node(self, p) -> int | None:
        grid = self.field.grid
        j, i = grid.cell_of(p)
        n = j * grid.width + i
        if np.isfinite(self.cost_to_goal[n]) and self.field.contains(p):
            return n
        if len(self._reach_idx) == 0:
            return None
        k = np.argmin((self._cx[self._reach_idx] - p[0]) ** 2 + (self._cy[self._reach_idx] - p[1]) ** 2)
        return int(self._reach_idx[k])

    def cell_path(self, node: int) -> list[int]:
        out = [node]
        while out[-1] != self.goal_node:
            nxt = int(self.next_node[out[-1]])
            if nxt < 0:
                raise RuntimeError("broken predecessor chain")
            out.append(nxt)
        return out

    def line_of_sight(self, a, b) -> bool:
        L = math.hypot(b[0] - a[0], b[1] - a[1])
        n = max(int(math.ceil(L / (0.25 * self.field.resolution))), 1)
        t = np.linspace(0.0, 1.0, n + 1)[:, None]
        pts = np.asarray(a, float) + t * (np.asarray(b, float) - np.asarray(a, float))
        return bool(np.all(self.field.phi_env_many(pts) > 0.0))

    def _pull(self, pts: np.ndarray) -> np.ndarray:
        """Greedy shortcutting: from each anchor jump to the farthest visible waypoint.

        The farthest index is found by trying the end first, then bisecting;
        every accepted jump is an explicitly verified line-of-sight segment.
        """
        out = [pts[0]]
        anchor, last = 0, len(pts) - 1
        while anchor < last:
            if self.line_of_sight(pts[anchor], pts[last]):
                nxt = last
            else:
                lo, hi = anchor + 1, last  # pts[lo] reachable (grid neighbour), pts[hi] not
                while hi - lo > 1:
                    mid = (lo + hi) // 2
                    if self.line_of_sight(pts[anchor], pts[mid]):
                        lo = mid
                    else:
                        hi = mid
                nxt = lo
            out.append(pts[nxt])
            anchor = nxt
        return np.array(out)

    def pulled_from_node(self, node: int) -> np.ndarray:
        got = self._pulled.get(node)
        if got is None:
            nodes = self.cell_path(node)
            pts = np.column_stack([self._cx[nodes], self._cy[nodes]])
            pts[-1] = self.goal
            got = self._pull(pts)
            self._pulled[node] = got
        return got

    def shortest_path(self, p) -> np.ndarray | None:
        """Shortcut static shortest path from ``p`` to the goal point, or ``None``."""
        if not self.reachable_goal:
            return None
        node = self.start_node(p)
        if node is None:
            return None
        base = self.pulled_from_node(node)
        p = np.asarray(p, dtype=float)
        if len(base) > 1 and self.line_of_sight(p, base[1]):
            return np.vstack([p, base[1:]])
        return np.vstack([p, base])


    def _segments_clear(self, a: np.ndarray, b: np.ndarray, step: float) -> np.ndarray:
        """Row-wise line of sight for segment batches ``a[k] -> b[k]``."""
        d = np.hypot(*(b - a).T)
        n = max(int(math.ceil(d.max() / step)), 1) if len(d) else 1
        t = np.linspace(0.0, 1.0, n + 1)[None, :, None]
        pts = a[:, None, :] + t * (b - a)[:, None, :]
        return np.all(self.field.phi_env_many(pts.reshape(-1, 2)).reshape(len(a), -1) > 0.0, axis=1)

    def tighten(self, pts: np.ndarray, min_segment: float = 0.02, sweeps: int = 100,
                tol: float = 1e-6) -> np.ndarray:
        """Pull a free polyline taut inside ``phi_env > 0``.

        Coarse to fine: every interior vertex moves toward the midpoint of its
        neighbours (odd and even vertices alternately, halving the step until
        both new segments stay clear), then long segments are split and the
        band is relaxed again. Vertices only move when that shortens the path,
        so the result is never longer than the input.
        """
        P = np.array(pts, dtype=float)
        step = 0.25 * self.field.resolution
        while True:
            prev = _polyline_length(P)
            for _ in range(sweeps):
                for parity in (1, 2):
                    idx = np.arange(parity, len(P) - 1, 2)
                    if len(idx) == 0:
                        continue
                    v, a, b = P[idx], P[idx - 1], P[idx + 1]
                    m = 0.5 * (a + b)
                    s = np.ones(len(idx))
                    done = np.zeros(len(idx), bool)
                    new = v.copy()
                    for _ in range(12):
                        c = v + s[:, None] * (m - v)
                        ok = ~done & self._segments_clear(a, c, step) & self._segments_clear(c, b, step)
                        new[ok] = c[ok]
                        done |= ok
                        if done.all():
                            break
                        s[~done] *= 0.5
                    P[idx] = new
                cur = _polyline_length(P)
                if prev - cur < tol:
                    break
                prev = cur
            seg = np.hypot(*np.diff(P, axis=0).T)
            if len(seg) == 0 or seg.max() <= 2 * min_segment:
                return P
            out = [P[0]]
            for a, b, L in zip(P[:-1], P[1:], seg):
                if L > 2 * min_segment:
                    out.append(0.5 * (a + b))
                out.append(b)
            P = np.array(out)


def _polyline_length(P: np.ndarray) -> float:
    return float(np.sum(np.hypot(*np.diff(P, axis=0).T))) if len(P) > 1 else 0.0


def routes_for(field: PassabilityField, goal) -> StaticRoutes:
    """Cached :class:`StaticRoutes`, shared by planner and path-efficiency metric."""
    cache = field.__dict__.setdefault("_routes_cache", {})
    key = (float(goal[0]), float(goal[1]))
    r = cache.get(key)
    if r is None:
        r = cache[key] = StaticRoutes(field, key)
    return r


def static_shortest_length(field: PassabilityField, start, goal) -> float:
    """Static shortest free path length from ``start`` to the goal point; ``inf`` if unreachable.

    Candidate 0's route pulled taut. Candidate 0 itself keeps the cell-centre
    vertices, which hold it off the zero-margin boundary; the taut length is
    what a collision-free run can actually approach.
    """
    routes = routes_for(field, goal)
    path = routes.shortest_path(start)
    if path is None:
        return math.inf
    if len(path) > 2:
        path = routes.tighten(path)
    return _polyline_length(path)


# ---------------------------------------------------------------------------
# candidates


@dataclass
class PlannerConfig:
    n_candidates: int = 7
    offsets: tuple[float, ...] = (0.3, -0.3, 0.6, -0.6, 0.9, -0.9)
    offset_ramp: float = 1.0
    offset_hold: float = 1.5  # length held at full offset before blending back onto candidate 0
    margin_weight: float = 0.5
    margin_scale: float = 0.3
    turn_weight: float = 0.2
    dyn_lookahead: float = 1.0
    replan_every: int = 5
    threat_horizon: float = 1.0

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate")
        if self.replan_every < 1:
            raise ValueError("replan_every must be >= 1")
        if not self.threat_horizon > 0:
            raise ValueError("threat_horizon must be positive")


@dataclass
class CandidateSet:
    paths: list[ReferencePath] = dc_field(default_factory=list)
    scores: list[float] = dc_field(default_factory=list)
    feasible: list[bool] = dc_field(default_factory=list)
    status: str = "ok"  # ok | degraded | unreachable

    def __len__(self):
        return len(self.paths)


def _smoothstep(u):
    u = np.minimum(np.maximum(u, 0.0), 1.0)
    return u * u * (3 - 2 * u)


def _offset_paths(base: ReferencePath, offsets: Sequence[float], ramp: float,
                  field: PassabilityField, hold: float = math.inf) -> list[ReferencePath]:
    """Local lateral detours from ``base`` (left positive).

    Each detour blends in over ``ramp`` metres, holds its offset for ``hold``
    metres, then blends back onto ``base``; it also returns to ``base`` at
    the goal end.
    """
    if not offsets:
        return []
    s, L = base.s, base.length
    if L <= 0:
        return [ReferencePath(base.points) for _ in offsets]
    w = _smoothstep(s / ramp) * _smoothstep((L - s) / ramp)
    if math.isfinite(hold):
        w = w * (1.0 - _smoothstep((s - ramp - hold) / ramp))
    # average neighbouring segment normals so corners bend instead of tearing
    h = base.headings
    hp = np.concatenate([h[:1], h[:-1]])
    nx = -(np.sin(h) + np.sin(hp))
    ny = np.cos(h) + np.cos(hp)
    nn = np.hypot(nx, ny)
    nn[nn < 1e-9] = 1.0
    shift = (w / nn)[:, None] * np.column_stack([nx, ny])
    g = field.grid
    lo = np.array(g.origin) + 1e-6
    hi = lo + np.array([g.width, g.height]) * g.resolution - 2e-6
    out = []
    for d in offsets:
        pts = np.minimum(np.maximum(base.points + d * shift, lo), hi)
        pts[0] = base.points[0]
        out.append(ReferencePath(pts))
    return out


def _offset_path(base: ReferencePath, d: float, ramp: float, field: PassabilityField,
                 hold: float = math.inf) -> ReferencePath:
    return _offset_paths(base, [d], ramp, field, hold)[0]


def generate_candidates(robot: RobotState, goal: Goal, field: PassabilityField,
                        cfg: PlannerConfig = PlannerConfig()) -> CandidateSet:
    """Static shortest path from the robot plus lateral-offset variants of it."""
    routes = routes_for(field, goal.center)
    pts = routes.shortest_path(robot.position)
    if pts is None:
        return CandidateSet(status="unreachable")
    base = ReferencePath(pts)
    paths = [base] + _offset_paths(base, cfg.offsets[: cfg.n_candidates - 1], cfg.offset_ramp, field,
                                   cfg.offset_hold)
    # one batched field query for every candidate
    allv = field.phi_env_many(np.vstack([p.points for p in paths]))
    k = 0
    for p in paths:
        p._env_cache = (field, allv[k:k + len(p)])
        k += len(p)
    return CandidateSet(paths, [0.0] * len(paths), [True] * len(paths), "ok")


def _dyn_margin(path: ReferencePath, predictions: Sequence[ObstacleDisk], geom: SafetyGeometry,
                lookahead: float) -> float:
    if not predictions:
        return math.inf
    n = int(np.searchsorted(path.s, lookahead, side="right"))
    pts = path.points[: max(n, 1)]
    best = math.inf
    for o in predictions:
        m = float(np.min(np.hypot(pts[:, 0] - o.x, pts[:, 1] - o.y))) - geom.effective_radius(o.radius)
        best = min(best, m)
    return best


def filter_feasible(cands: CandidateSet, field: PassabilityField, predictions: Sequence[ObstacleDisk],
                    geom: SafetyGeometry, cfg: PlannerConfig = PlannerConfig()) -> CandidateSet:
    """Drop candidates that leave ``phi_env > 0`` or hit a predicted obstacle early.

    If nothing survives, the single candidate with the largest worst-case
    margin is kept and the set is marked ``degraded``.
    """
    if not cands.paths:
        return cands
    env = [float(np.min(p.env_margins(field))) for p in cands.paths]
    dyn = [_dyn_margin(p, predictions, geom, cfg.dyn_lookahead) for p in cands.paths]
    keep = [k for k in range(len(cands)) if env[k] > 0 and dyn[k] > 0]
    if keep:
        return CandidateSet([cands.paths[k] for k in keep], [cands.scores[k] for k in keep],
                            [True] * len(keep), cands.status)
    worst = [min(e, d) for e, d in zip(env, dyn)]
    k = int(np.argmax(worst))
    return CandidateSet([cands.paths[k]], [cands.scores[k]], [False], "degraded")


def score_candidate(path: ReferencePath, field: PassabilityField, cfg: PlannerConfig = PlannerConfig()) -> float:
    """Higher is better: short, wide-margin, low-turning paths."""
    if len(path) < 2:
        return -path.length
    phi = path.env_margins(field)
    seg = path.s[1:] - path.s[:-1]
    mid = 0.5 * (np.exp(-phi[:-1] / cfg.margin_scale) + np.exp(-phi[1:] / cfg.margin_scale))
    margin_cost = float(np.sum(mid * seg))
    return -path.length - cfg.margin_weight * margin_cost - cfg.turn_weight * path.turning()


def select_reference(cands: CandidateSet) -> ReferencePath:
    """Highest score wins; ties go to the lowest index."""
    if not cands.paths:
        raise ValueError("no candidates to select from")
    best = 0
    for k in range(1, len(cands.scores)):
        if cands.scores[k] > cands.scores[best]:
            best = k
    return cands.paths[best]


# ---------------------------------------------------------------------------
# threat


@dataclass(frozen=True)
class ThreatScore:
    value: float
    index: int | None


def approach_speed(robot: RobotState, obs: ObstacleDisk) -> float:
    """Rate at which the center distance shrinks (positive when closing)."""
    rx, ry = robot.x - obs.x, robot.y - obs.y
    dist = math.hypot(rx, ry)
    if dist < 1e-9:
        return math.hypot(obs.vx, obs.vy)
    wvx, wvy = robot.world_velocity()
    return -(rx * (wvx - obs.vx) + ry * (wvy - obs.vy)) / dist


def time_to_contact(robot: RobotState, obs: ObstacleDisk, geom: SafetyGeometry) -> float:
    m = max(phi_dyn(robot.position, obs, geom), 0.0)
    v = max(approach_speed(robot, obs), 0.0)
    return m / (v + 1e-6)


def threat_score(robot: RobotState, predictions: Sequence[ObstacleDisk], geom: SafetyGeometry,
                 horizon: float = 1.0) -> ThreatScore:
    best, idx = 0.0, None
    for k, o in enumerate(predictions):
        tc = time_to_contact(robot, o, geom)
        v = min(max(1.0 - tc / horizon, 0.0), 1.0)
        if v > best:
            best, idx = v, k
    return ThreatScore(best, idx)


# ---------------------------------------------------------------------------
# multi-rate loop


@dataclass
class PlannerOutput:
    path: ReferencePath
    predictions: list
    threat: ThreatScore
    path_step: int
    fast_step: int
    status: str


class Planner:
    """Per-episode planner state: slow path cache plus per-step threat."""

    def __init__(self, field: PassabilityField, goal: Goal, geom: SafetyGeometry,
                 cfg: PlannerConfig = PlannerConfig()):
        self.field = field
        self.goal = goal
        self.geom = geom
        self.cfg = cfg
        self.path: ReferencePath | None = None
        self.path_step = -1
        self.status = "ok"
        self.last_candidates: CandidateSet | None = None

    def replan(self, robot: RobotState, predictions) -> None:
        cands = generate_candidates(robot, self.goal, self.field, self.cfg)
        if cands.status == "unreachable":
            self.status = "unreachable"
            if self.path is None:
                self.path = ReferencePath([robot.position, self.goal.center])
            return
        cands = filter_feasible(cands, self.field, predictions, self.geom, self.cfg)
        cands.scores = [score_candidate(p, self.field, self.cfg) for p in cands.paths]
        self.last_candidates = cands
        self.path = select_reference(cands)
        self.status = cands.status

    def tick(self, step: int, robot: RobotState, predictions) -> PlannerOutput:
        if self.path is None or step % self.cfg.replan_every == 0:
            self.replan(robot, predictions)
            self.path_step = step
        threat = threat_score(robot, predictions, self.geom, self.cfg.threat_horizon)
        return PlannerOutput(self.path, list(predictions), threat, self.path_step, step, self.status)
