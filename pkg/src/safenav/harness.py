"""Seeded batch evaluation: episode summaries, aggregate metrics, paired bootstrap gaps and report files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rand_core import ALGORITHM_ID, derive_state
from .sim import VARIANTS, EpisodeLog, ScenarioConfig, field_for, load_scenario, run_episode

log = logging.getLogger(__name__)

EPISODE_COLUMNS = ("seed", "variant", "goal", "static_collision", "dynamic_collision", "termination",
                   "L_act", "L_stat", "PE", "d_min", "LC")
METRICS = ("GCR", "ASR", "TSR", "PE", "d_min", "LC")
RATE_METRICS = ("GCR", "ASR", "TSR")
TRACE_COLUMNS = ("step", "t", "threat", "h_env", "h_dyn_min", "shield_status", "threat_index", "n_obstacles")


@dataclass(frozen=True)
class LCConfig:
    """Weights and reference scales of the locomotion-cost metric."""

    weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    theta0: float = 0.3
    u0: float = 1.0


@dataclass(frozen=True)
class EpisodeSummary:
    """One row of the per-episode table. ``PE`` is set only for successful episodes."""

    seed: int
    variant: str
    goal: bool
    static_collision: bool
    dynamic_collision: bool
    termination: str
    L_act: float
    L_stat: float
    PE: float | None
    d_min: float | None
    LC: float | None

    @property
    def avoided(self) -> bool:
        return not self.dynamic_collision

    @property
    def success(self) -> bool:
        return self.goal and not self.dynamic_collision

    @classmethod
    def from_log(cls, lg: EpisodeLog, lc: LCConfig = LCConfig()) -> "EpisodeSummary":
        d_min = lg.d_min if math.isfinite(lg.d_min) else None
        return cls(lg.seed, lg.variant, lg.goal, lg.static_collision, lg.dynamic_collision, lg.termination,
                   lg.L_act, lg.L_stat, lg.PE, d_min, lg.LC(lc.weights, lc.theta0, lc.u0))


@dataclass(frozen=True)
class Stat:
    mean: float | None
    std: float | None
    n: int


def _stat(values: Sequence[float]) -> Stat:
    if not values:
        return Stat(None, None, 0)
    a = np.asarray(values, dtype=float)
    return Stat(float(a.mean()), float(a.std()), len(a))


@dataclass(frozen=True)
class MetricsReport:
    variant: str
    n_total: int
    n_goal: int
    n_avoid: int
    n_success: int
    GCR: Stat
    ASR: Stat
    TSR: Stat
    PE: Stat
    d_min: Stat
    LC: Stat
    scenario: str = ""

    def metric(self, name: str) -> Stat:
        return getattr(self, name)

    def identity_violations(self, tol: float = 0.0) -> list[str]:
        """Metric identities that do not hold on this report (empty when consistent)."""
        bad = []
        if self.TSR.mean > min(self.GCR.mean, self.ASR.mean) + tol:
            bad.append(f"TSR {self.TSR.mean} > min(GCR, ASR)")
        for k in RATE_METRICS:
            if not 0.0 <= self.metric(k).mean <= 1.0:
                bad.append(f"{k} {self.metric(k).mean} outside [0, 1]")
        return bad


def compute_metrics(episodes: Iterable[EpisodeLog | EpisodeSummary], variant: str | None = None,
                    lc: LCConfig = LCConfig(), scenario: str = "") -> MetricsReport:
    """Rates over all episodes; PE, d_min and LC over successful episodes only (absent if none)."""
    eps = [e if isinstance(e, EpisodeSummary) else EpisodeSummary.from_log(e, lc) for e in episodes]
    if not eps:
        raise ValueError("compute_metrics needs at least one episode")
    if variant is None:
        names = {e.variant for e in eps}
        if len(names) != 1:
            raise ValueError(f"batch mixes variants {sorted(names)}; pass variant explicitly")
        variant = names.pop()
    goal = [float(e.goal) for e in eps]
    avoid = [float(e.avoided) for e in eps]
    succ = [float(e.success) for e in eps]
    ok = [e for e in eps if e.success]
    for e in ok:
        if e.PE is not None and not 0.0 < e.PE <= 1.0:
            log.warning("seed %d: path efficiency %r outside (0, 1]", e.seed, e.PE)
    rep = MetricsReport(
        variant, len(eps), int(sum(goal)), int(sum(avoid)), int(sum(succ)),
        _stat(goal), _stat(avoid), _stat(succ),
        _stat([e.PE for e in ok if e.PE is not None]),
        _stat([e.d_min for e in ok if e.d_min is not None]),
        _stat([e.LC for e in ok if e.LC is not None]),
        scenario,
    )
    for msg in rep.identity_violations():
        log.error("metric identity violated for %s: %s", variant, msg)
    return rep


# ---------------------------------------------------------------------------
# paired bootstrap


@dataclass(frozen=True)
class GapCI:
    """``estimate = metric(a) - metric(b)`` with a percentile bootstrap interval."""

    scenario: str
    metric: str
    a: str
    b: str
    estimate: float | None
    lo: float | None
    hi: float | None
    resamples: int

    @property
    def excludes_zero(self) -> bool:
        return self.lo is not None and (self.lo > 0.0 or self.hi < 0.0)


def _episode_arrays(eps: Sequence[EpisodeSummary], metric: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode value and inclusion mask for ``metric``."""
    if metric == "GCR":
        return np.array([float(e.goal) for e in eps]), np.ones(len(eps), bool)
    if metric == "ASR":
        return np.array([float(e.avoided) for e in eps]), np.ones(len(eps), bool)
    if metric == "TSR":
        return np.array([float(e.success) for e in eps]), np.ones(len(eps), bool)
    vals = [getattr(e, metric) if e.success else None for e in eps]
    mask = np.array([v is not None for v in vals])
    return np.array([v if v is not None else 0.0 for v in vals], dtype=float), mask


def paired_bootstrap(a: Sequence[EpisodeSummary], b: Sequence[EpisodeSummary], metric: str,
                     resamples: int = 10_000, seed: int = 0, level: float = 0.95,
                     scenario: str = "") -> GapCI:
    """Bootstrap CI of ``metric(a) - metric(b)`` resampling shared seeds jointly.

    Episodes are matched by seed. Conditional metrics (PE, d_min, LC) are
    re-averaged over the successful episodes inside each resample; resamples
    where either side has no successes are discarded.
    """
    by_seed = {e.seed: e for e in b}
    if len(by_seed) != len(b) or {e.seed for e in a} != set(by_seed):
        raise ValueError("paired bootstrap needs identical seed sets on both sides")
    b = [by_seed[e.seed] for e in a]
    xa, ma = _episode_arrays(a, metric)
    xb, mb = _episode_arrays(b, metric)
    name_a, name_b = a[0].variant, b[0].variant
    if not ma.any() or not mb.any():
        return GapCI(scenario, metric, name_a, name_b, None, None, None, resamples)
    est = float(xa[ma].mean() - xb[mb].mean())
    rng = np.random.default_rng(seed)
    n = len(a)
    diffs = []
    chunk = max(1, min(resamples, 2_000_000 // max(n, 1)))
    done = 0
    while done < resamples:
        m = min(chunk, resamples - done)
        idx = rng.integers(0, n, size=(m, n))
        ca, cb = ma[idx].sum(1), mb[idx].sum(1)
        sa, sb = (xa * ma)[idx].sum(1), (xb * mb)[idx].sum(1)
        keep = (ca > 0) & (cb > 0)
        diffs.append(sa[keep] / ca[keep] - sb[keep] / cb[keep])
        done += m
    d = np.concatenate(diffs)
    if d.size == 0:
        return GapCI(scenario, metric, name_a, name_b, est, None, None, resamples)
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(d, [q, 1.0 - q])
    return GapCI(scenario, metric, name_a, name_b, est, float(lo), float(hi), resamples)


# ---------------------------------------------------------------------------
# batch runner


def episode_seeds(master_seed: int, n: int) -> list[int]:
    return [derive_state(master_seed, "episode", i) for i in range(n)]


@dataclass
class BenchmarkResult:
    master_seed: int
    seeds: list[int]
    variants: list[str]
    scenarios: list[str]
    episodes: dict[tuple[str, str], list[EpisodeSummary]]
    reports: dict[tuple[str, str], MetricsReport]
    gaps: list[GapCI]
    traces: dict[tuple[str, str, int], list[tuple]] = field(default_factory=dict)
    max_dfuse: dict[tuple[str, str], tuple[float, float, float]] = field(default_factory=dict)
    onset: dict[tuple[str, str], tuple[int, int]] = field(default_factory=dict)  # (violations, onset steps)
    rate_limits: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    rng_algorithm: str = ALGORITHM_ID


# per-process scenario cache for worker processes
_WORKER_CFGS: dict[str, ScenarioConfig] = {}


def _worker_init(cfgs: dict[str, ScenarioConfig]):
    _WORKER_CFGS.clear()
    _WORKER_CFGS.update(cfgs)


def _run_chunk(args) -> list[tuple]:
    name, variant, seeds, lc, record_seeds = args
    cfg = _WORKER_CFGS[name]
    fld = field_for(cfg)
    out = []
    for s in seeds:
        lg = run_episode(cfg, s, variant, record=s in record_seeds, field=fld)
        trace = None
        if lg.rows is not None:
            trace = [_trace_row(r) for r in lg.rows]
        out.append((EpisodeSummary.from_log(lg, lc), lg.max_dfuse, lg.onset_violations, lg.onset_steps, trace))
    return out


def _trace_row(r) -> tuple:
    from .sim import STEP_COLUMNS
    pos = {c: i for i, c in enumerate(STEP_COLUMNS)}
    return (r[pos["step"]], r[pos["t"]], r[pos["threat"]], r[pos["h_env"]], r[pos["phi_dyn_min"]],
            r[pos["shield_status"]], r[pos["threat_index"]], r[pos["n_obstacles"]])


def load_scenarios(paths: Sequence[str | Path], dt: float | None = None) -> dict[str, ScenarioConfig]:
    """Load every scenario up front so a bad file aborts before any episode runs."""
    if not paths:
        raise ValueError("need at least one scenario")
    cfgs = {}
    for p in paths:
        cfg = load_scenario(p)
        if dt is not None:
            cfg = dataclasses.replace(cfg, dt=float(dt))
        if cfg.name in cfgs:
            raise ValueError(f"duplicate scenario name {cfg.name!r}")
        field_for(cfg)  # build now so map problems surface early
        cfgs[cfg.name] = cfg
    return cfgs


def run_benchmark(scenarios: Sequence[str | Path] | dict[str, ScenarioConfig], variants: Sequence[str] = VARIANTS,
                  n_episodes: int | None = None, master_seed: int = 0, seeds: Sequence[int] | None = None,
                  parallel: int = 1, dt: float | None = None, lc: LCConfig = LCConfig(),
                  trace_episodes: Sequence[int] = (), bootstrap_resamples: int = 10_000,
                  bootstrap_seed: int | None = None, chunk_size: int = 25) -> BenchmarkResult:
    """Run every variant on the identical seed list for every scenario.

    ``trace_episodes`` are episode indices whose threat and barrier traces are kept.
    Results do not depend on ``parallel`` or ``chunk_size``.
    """
    cfgs = scenarios if isinstance(scenarios, dict) else load_scenarios(scenarios, dt)
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {VARIANTS}")
    if not variants:
        raise ValueError("need at least one variant")
    if seeds is None:
        if n_episodes is None or n_episodes < 1:
            raise ValueError("need at least one episode")
        seeds = episode_seeds(master_seed, n_episodes)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seed list contains duplicates")
    record = {seeds[i] for i in trace_episodes if 0 <= i < len(seeds)}

    jobs = []
    for name in cfgs:
        for v in variants:
            for i in range(0, len(seeds), chunk_size):
                jobs.append((name, v, seeds[i:i + chunk_size], lc, record))
    if parallel > 1:
        with ProcessPoolExecutor(parallel, initializer=_worker_init, initargs=(cfgs,)) as ex:
            results = list(ex.map(_run_chunk, jobs))
    else:
        _worker_init(cfgs)
        results = [_run_chunk(j) for j in jobs]

    episodes: dict[tuple[str, str], list[EpisodeSummary]] = {}
    max_df: dict[tuple[str, str], list[float]] = {}
    onset: dict[tuple[str, str], list[int]] = {}
    traces = {}
    for (name, v, _, _, _), res in zip(jobs, results):
        key = (name, v)
        episodes.setdefault(key, [])
        mdf = max_df.setdefault(key, [0.0, 0.0, 0.0])
        ons = onset.setdefault(key, [0, 0])
        for summ, dfuse, n_viol, n_on, trace in res:
            episodes[key].append(summ)
            for j in range(3):
                mdf[j] = max(mdf[j], dfuse[j])
            ons[0] += n_viol
            ons[1] += n_on
            if trace is not None:
                traces[(name, v, summ.seed)] = trace

    reports = {k: compute_metrics(e, k[1], lc, k[0]) for k, e in episodes.items()}
    gaps = []
    bseed = master_seed if bootstrap_seed is None else bootstrap_seed
    ref = "full" if "full" in variants else variants[0]
    for name in cfgs:
        for v in variants:
            if v == ref:
                continue
            for m in METRICS:
                gaps.append(paired_bootstrap(episodes[(name, ref)], episodes[(name, v)], m,
                                             bootstrap_resamples, bseed, scenario=name))
    return BenchmarkResult(master_seed, seeds, variants, list(cfgs), episodes, reports, gaps, traces,
                           {k: tuple(v) for k, v in max_df.items()}, {k: tuple(v) for k, v in onset.items()},
                           {n: tuple(c.handoff.rate_limits) for n, c in cfgs.items()})


# ---------------------------------------------------------------------------
# report files


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _header(result: BenchmarkResult) -> str:
    return f"# rng_algorithm={result.rng_algorithm} master_seed={result.master_seed}\n"


def episodes_csv(rows: Sequence[EpisodeSummary], header: str = "") -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for e in rows:
        w.writerow([_fmt(getattr(e, c)) for c in EPISODE_COLUMNS])
    return buf.getvalue()


def _opt_float(s: str) -> float | None:
    return None if s == "" else float(s)


def read_episodes_csv(path_or_text: str | Path) -> list[EpisodeSummary]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else path_or_text
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rd = csv.reader(lines)
    head = next(rd)
    if tuple(head) != EPISODE_COLUMNS:
        raise ValueError(f"unexpected episode columns {head}")
    out = []
    for r in rd:
        out.append(EpisodeSummary(int(r[0]), r[1], r[2] == "1", r[3] == "1", r[4] == "1", r[5],
                                  float(r[6]), float(r[7]), _opt_float(r[8]), _opt_float(r[9]), _opt_float(r[10])))
    return out


SUMMARY_COLUMNS = ("scenario", "variant", "n_total", "n_goal", "n_avoid", "n_success") + tuple(
    f"{m}_{s}" for m in METRICS for s in ("mean", "std", "n")) + ("rng_algorithm",)


def summary_csv(reports: Sequence[MetricsReport], rng_algorithm: str = ALGORITHM_ID, header: str = "") -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in reports:
        row = [r.scenario, r.variant, r.n_total, r.n_goal, r.n_avoid, r.n_success]
        for m in METRICS:
            st = r.metric(m)
            row += [_fmt(st.mean), _fmt(st.std), st.n]
        w.writerow(row + [rng_algorithm])
    return buf.getvalue()


def read_summary_csv(path_or_text: str | Path) -> list[MetricsReport]:
    text = Path(path_or_text).read_text() if isinstance(path_or_text, Path) else path_or_text
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rd = csv.DictReader(lines)
    if tuple(rd.fieldnames or ()) != SUMMARY_COLUMNS:
        raise ValueError(f"unexpected summary columns {rd.fieldnames}")
    out = []
    for r in rd:
        st = {m: Stat(_opt_float(r[f"{m}_mean"]), _opt_float(r[f"{m}_std"]), int(r[f"{m}_n"])) for m in METRICS}
        out.append(MetricsReport(r["variant"], int(r["n_total"]), int(r["n_goal"]), int(r["n_avoid"]),
                                 int(r["n_success"]), scenario=r["scenario"], **st))
    return out


GAP_COLUMNS = ("scenario", "metric", "a", "b", "estimate", "ci_lo", "ci_hi", "resamples", "excludes_zero")


def gaps_csv(gaps: Sequence[GapCI], header: str = "") -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GAP_COLUMNS)
    for g in gaps:
        w.writerow([g.scenario, g.metric, g.a, g.b, _fmt(g.estimate), _fmt(g.lo), _fmt(g.hi), g.resamples,
                    _fmt(g.excludes_zero)])
    return buf.getvalue()


def trace_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _report_dict(r: MetricsReport) -> dict:
    d = {"scenario": r.scenario, "variant": r.variant, "n_total": r.n_total, "n_goal": r.n_goal,
         "n_avoid": r.n_avoid, "n_success": r.n_success}
    for m in METRICS:
        st = r.metric(m)
        d[m] = {"mean": st.mean, "std": st.std, "n": st.n}
    return d


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write report file {path}: {e}") from e


def emit_report(result: BenchmarkResult, out: str | Path, fmt: str = "csv") -> list[Path]:
    """Write per-episode tables, the summary, bootstrap gaps and trace files; returns the written paths."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    header = _header(result)
    written = []
    if fmt == "csv":
        for name in result.scenarios:
            rows = [e for v in result.variants for e in result.episodes[(name, v)]]
            p = out / (f"episodes_{name}.csv" if len(result.scenarios) > 1 else "episodes.csv")
            _write(p, episodes_csv(rows, header))
            written.append(p)
        p = out / "summary.csv"
        _write(p, summary_csv([result.reports[(n, v)] for n in result.scenarios for v in result.variants],
                              result.rng_algorithm, header))
        written.append(p)
        p = out / "gaps.csv"
        _write(p, gaps_csv(result.gaps, header))
        written.append(p)
    else:
        doc = {
            "rng_algorithm": result.rng_algorithm,
            "master_seed": result.master_seed,
            "seeds": result.seeds,
            "variants": result.variants,
            "scenarios": result.scenarios,
            "reports": [_report_dict(result.reports[(n, v)]) for n in result.scenarios for v in result.variants],
            "episodes": {f"{n}/{v}": [dataclasses.asdict(e) for e in result.episodes[(n, v)]]
                         for n in result.scenarios for v in result.variants},
            "gaps": [dataclasses.asdict(g) | {"excludes_zero": g.excludes_zero} for g in result.gaps],
            "max_dfuse": {f"{n}/{v}": list(x) for (n, v), x in result.max_dfuse.items()},
            "onset": {f"{n}/{v}": {"violations": x[0], "steps": x[1]} for (n, v), x in result.onset.items()},
        }
        p = out / "report.json"
        _write(p, json.dumps(doc, indent=1) + "\n")
        written.append(p)
    if result.traces:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for (name, v, seed), rows in sorted(result.traces.items()):
            p = tdir / f"{name}_{v}_{seed}.csv"
            _write(p, trace_csv(rows))
            written.append(p)
    return written
