"""Command-line batch runner: ``safenav --scenario coupled --episodes 200 --out results``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .harness import emit_report, load_scenarios, run_benchmark
from .sim import VARIANTS

DATA_DIR = Path(__file__).resolve().parent / "data"


def resolve_scenario(name: str) -> Path:
    """A path to a scenario file, or the name of a bundled one (``coupled``, ``duel``, ``open``)."""
    p = Path(name)
    if p.exists():
        return p
    bundled = DATA_DIR / f"{name}.json"
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"scenario {name!r} is neither a file nor a bundled scenario")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safenav", description="Run seeded closed-loop navigation benchmarks.")
    ap.add_argument("--scenario", action="append", required=True,
                    help="scenario file or bundled name; repeatable")
    ap.add_argument("--variant", action="append", choices=VARIANTS,
                    help="ablation variant; repeatable (default: all)")
    ap.add_argument("--episodes", type=int, default=100, help="episodes per variant and scenario")
    ap.add_argument("--seed", type=int, default=0, help="master seed")
    ap.add_argument("--dt", type=float, default=None, help="override the scenario control period (s)")
    ap.add_argument("--out", default="results", help="output directory")
    ap.add_argument("--format", choices=("csv", "json"), default="csv")
    ap.add_argument("--parallel", type=int, default=1, help="worker processes")
    ap.add_argument("--trace-episodes", type=int, nargs="*", default=[],
                    help="episode indices whose threat and barrier traces are written")
    ap.add_argument("--bootstrap", type=int, default=10_000, help="bootstrap resamples for variant gaps")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.episodes < 1:
        print("error: --episodes must be >= 1", file=sys.stderr)
        return 2
    if args.dt is not None and not args.dt > 0:
        print("error: --dt must be positive", file=sys.stderr)
        return 2
    try:
        paths = [resolve_scenario(s) for s in args.scenario]
        cfgs = load_scenarios(paths, args.dt)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    variants = args.variant or list(VARIANTS)
    t0 = time.time()
    result = run_benchmark(cfgs, variants, n_episodes=args.episodes, master_seed=args.seed,
                           parallel=args.parallel, trace_episodes=args.trace_episodes,
                           bootstrap_resamples=args.bootstrap)
    try:
        written = emit_report(result, args.out, args.format)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for (name, v), rep in result.reports.items():
        def f(st):
            return "  n/a " if st.mean is None else f"{st.mean:6.3f}"
        print(f"{name:10s} {v:13s} GCR {f(rep.GCR)} ASR {f(rep.ASR)} TSR {f(rep.TSR)} "
              f"PE {f(rep.PE)} d_min {f(rep.d_min)} LC {f(rep.LC)}")
    print(f"{len(written)} files written to {args.out} in {time.time() - t0:.1f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
