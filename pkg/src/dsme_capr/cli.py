"""Command line front end: simulations, sweeps and the analytic tables.

Every scenario flag can also come from a flat ``key=value`` file passed with
``--config``; flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

from .analytic import (
    CapProfile,
    access_time_surface,
    expected_channel_access,
    expected_cap_wait_slots,
    fraction_tau,
    theoretical_dwell_ms,
)
from .frame_structure import ConfigError, Mode, ProtocolConfig
from .metrics import MetricsRecord, aggregate, reduce, write_dwell, write_gts, write_summary
from .scheduler import SchedulerConfig
from .sim import Scenario, run
from .traffic import Pattern, Topology, TrafficConfig, build_binary_tree, load_edge_list

THREADS_ENV = "DSME_CAPR_THREADS"
DESK = {"topology": "tree:31", "duration": 60.0, "runs": 5}

# values printed alongside the exact results, keyed by (mode, MO) at SO=3
PUBLISHED_TAU = {("cr", 7): 0.9006}
PUBLISHED_WAIT = {("acr", 5): 14.10}


def int_range(text: str) -> list[int]:
    """``"4..7"`` -> [4, 5, 6, 7]; ``"1,3"`` -> [1, 3]; ``"5"`` -> [5]."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise argparse.ArgumentTypeError(f"empty range {part!r}")
            out.extend(range(lo_i, hi_i + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"no values in {text!r}")
    return out


def word_list(choices):
    def parse(text: str) -> list[str]:
        items = [w.strip().lower() for w in str(text).split(",") if w.strip()]
        bad = [w for w in items if w not in choices]
        if bad or not items:
            raise argparse.ArgumentTypeError(f"expected one of {sorted(choices)}, got {text!r}")
        return items
    return parse


def load_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def parse_topology(spec: str) -> Topology:
    if spec.startswith("tree:"):
        return build_binary_tree(int(spec[5:]))
    return load_edge_list(spec)


MODES = [m.value for m in Mode]
PATTERNS = [p.value for p in Pattern]


def _add_scenario_args(p: argparse.ArgumentParser, multi: bool) -> None:
    ints = int_range if multi else int
    p.add_argument("--config", help="key=value file with defaults for these flags")
    p.add_argument("--desk", action="store_true", help="31-node tree, 60 s, 5 runs")
    p.add_argument("--so", type=int, default=3)
    p.add_argument("--mo", type=ints, default=[7] if multi else 7)
    p.add_argument("--bo", type=int, default=7)
    p.add_argument("--mode", type=word_list(MODES) if multi else str.lower,
                   default="dcr" if not multi else MODES)
    p.add_argument("--delta", type=ints, default=[1] if multi else 1)
    p.add_argument("--pattern", type=word_list(PATTERNS) if multi else str.lower,
                   default="rate" if not multi else ["rate"])
    p.add_argument("--duration", type=float, default=None, help="simulated seconds")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--seed", type=int, default=1, help="seed of the first run")
    p.add_argument("--topology", default=None, help="edge-list file or tree:N")
    p.add_argument("--out", default="out")
    p.add_argument("--be", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--hysteresis", type=int, default=1)
    p.add_argument("--expiration", type=int, default=7, help="GTS expiration in MSFs")
    p.add_argument("--qcap", type=int, default=8)
    p.add_argument("--qgts", type=int, default=22)
    p.add_argument("--traces", action="store_true", help="also write one trace CSV per run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsme-capr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="replications of one configuration")
    _add_scenario_args(sim, multi=False)

    sweep = sub.add_parser("sweep", help="grid of configurations")
    _add_scenario_args(sweep, multi=True)
    sweep.add_argument("--paper-grid", action="store_true",
                       help="4 modes x MO 4..7 x delta 1..4 x both patterns")

    an = sub.add_parser("analytics", help="CAP fraction, expected CAP wait and dwell per mode")
    an.add_argument("--so", type=int, default=3)
    an.add_argument("--mo", type=int_range, default=[4, 5, 6, 7])
    an.add_argument("--be", type=int, default=3)
    an.add_argument("--out", default=None, help="CSV path (default: stdout)")

    sf = sub.add_parser("surface", help="expected channel access time over CAP count and length")
    sf.add_argument("--so", type=int, default=3)
    sf.add_argument("--mo", type=int, default=7)
    sf.add_argument("--be", type=int, default=3)
    sf.add_argument("--ncap", type=int_range, default=None, help="CAPs per MSF (default 1..N_SF)")
    sf.add_argument("--slots", type=int_range, default=[1, 2, 3, 4, 5, 6, 7, 8], help="slots per CAP")
    sf.add_argument("--denominator", choices=["uniform", "published"], default="uniform")
    sf.add_argument("--out", default=None, help="CSV path (default: stdout)")
    return parser


def parse_args(argv: list[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        values = load_config_file(args.config)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        for action in sub._actions:
            if action.dest in values and isinstance(action, argparse._StoreTrueAction):
                values[action.dest] = values[action.dest].lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    if hasattr(args, "runs"):
        desk = args.desk
        args.topology = args.topology or DESK["topology"]
        args.duration = args.duration if args.duration is not None else DESK["duration"]
        args.runs = args.runs if args.runs is not None else (DESK["runs"] if desk else 1)
    return args


# -- simulation jobs --

@dataclass(frozen=True)
class Job:
    index: int
    scenario: Scenario
    seed: int


def _scenario(args, mode: str, mo: int, delta: int, pattern: str, topology: Topology) -> Scenario:
    return Scenario(
        protocol=ProtocolConfig(so=args.so, mo=mo, bo=args.bo, mode=mode, be=args.be),
        traffic=TrafficConfig(pattern=pattern, delta=delta),
        topology=topology,
        duration_s=args.duration,
        q_cap=args.qcap,
        q_gts=args.qgts,
        scheduler=SchedulerConfig(alpha=args.alpha, hysteresis_margin=args.hysteresis,
                                  expiration_msfs=args.expiration),
    )


def _execute(job: Job, trace_dir: str | None) -> tuple[int, MetricsRecord, str]:
    trace = run(job.scenario, job.seed)
    trace.metadata["seed"] = job.seed
    if trace_dir:
        m = trace.metadata
        name = f"{m['mode']}_so{m['so']}_mo{m['mo']}_{m['pattern']}{m['delta']}_seed{job.seed}.csv"
        Path(trace_dir, name).write_text(trace.to_csv())
    rec = reduce(trace)
    rec.metadata["seed"] = job.seed
    rec.metadata["trace_sha256"] = trace.digest()
    return job.index, rec, trace.digest()


def worker_count(jobs: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if limit < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return max(1, min(limit, jobs))


def run_jobs(jobs: list[Job], trace_dir: str | None = None, on_result=None) -> tuple[list[MetricsRecord], list[str]]:
    """Run replications, in parallel when allowed; results come back in job order."""
    results: dict[int, MetricsRecord] = {}
    errors: list[str] = []
    workers = worker_count(len(jobs))

    def collect(index, outcome):
        if isinstance(outcome, BaseException):
            errors.append(f"job {index}: {outcome}")
            return
        _, rec, _ = outcome
        results[index] = rec
        if on_result is not None:
            on_result(rec)

    if workers == 1:
        for job in jobs:
            try:
                collect(job.index, _execute(job, trace_dir))
            except (ConfigError, ValueError, AssertionError) as exc:
                collect(job.index, exc)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_execute, job, trace_dir): job.index for job in jobs}
            for fut in as_completed(futures):
                exc = fut.exception()
                collect(futures[fut], exc if exc is not None else fut.result())
    return [results[i] for i in sorted(results)], errors


RUN_COLUMNS = ("mode", "so", "mo", "bo", "pattern", "delta", "nodes", "duration_s", "seed",
               "prr", "generated", "delivered", "dropped", "residual", "violations",
               "mean_queue", "dwell_ms_request", "trace_sha256")


def _run_row(rec: MetricsRecord) -> list:
    m = rec.metadata
    return [m["mode"], m["so"], m["mo"], m["bo"], m["pattern"], m["delta"], m["nodes"], m["duration_s"],
            m["seed"], f"{rec.prr:.6f}", rec.generated, rec.delivered, rec.dropped, rec.residual,
            rec.violations, f"{rec.mean_queue():.4f}", f"{rec.mean_dwell_ms():.4f}", m["trace_sha256"]]


def _simulate_grid(args, grid: list[tuple[str, int, int, str]]) -> int:
    topology = parse_topology(args.topology)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = None
    if args.traces:
        trace_dir = str(out / "traces")
        Path(trace_dir).mkdir(exist_ok=True)
    jobs = []
    for mode, mo, delta, pattern in grid:
        scenario = _scenario(args, mode, mo, delta, pattern, topology)
        for r in range(args.runs):
            jobs.append(Job(len(jobs), scenario, args.seed + r))

    # runs.csv grows as runs finish so an interrupted sweep keeps its results
    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_COLUMNS)

        def on_result(rec):
            writer.writerow(_run_row(rec))
            fh.flush()

        records, errors = run_jobs(jobs, trace_dir, on_result)

    write_dwell(records, out / "dwell.csv")
    write_gts(records, out / "gts.csv")
    if args.runs >= 2 and records:
        write_summary(aggregate(records), out / "summary.csv")
    else:
        print("summary.csv skipped: confidence intervals need --runs >= 2", file=sys.stderr)
    for rec in records:
        m = rec.metadata
        print(f"{m['mode']:>3} MO={m['mo']} {m['pattern']} delta={m['delta']} seed={m['seed']}: "
              f"PRR {rec.prr:.3f}  mean queue {rec.mean_queue():.2f}  "
              f"request dwell {rec.mean_dwell_ms():.1f} ms  violations {rec.violations}")
    for err in errors:
        print(f"error: {err}", file=sys.stderr)
    return 1 if errors else 0


def cmd_simulate(args) -> int:
    Mode.parse(args.mode)
    Pattern(args.pattern)
    return _simulate_grid(args, [(args.mode, args.mo, args.delta, args.pattern)])


def cmd_sweep(args) -> int:
    if args.paper_grid:
        modes, mos, deltas, patterns = MODES, [4, 5, 6, 7], [1, 2, 3, 4], PATTERNS
    else:
        modes, mos, deltas, patterns = args.mode, args.mo, args.delta, args.pattern
    grid = list(itertools.product(modes, mos, deltas, patterns))
    return _simulate_grid(args, grid)


# -- analytic tables --

def _fmt(x) -> str:
    if isinstance(x, tuple):
        return "..".join(_fmt(v) for v in x)
    return f"{float(x):.6f}"


def _access_slots(mode: str, so: int, mo: int, be: int):
    if mode == "dcr":
        return (_access_slots("ncr", so, mo, be), _access_slots("cr", so, mo, be))
    return expected_channel_access(CapProfile.for_mode(mode, so, mo), so, mo, be).total_slots


def analytics_rows(so: int, mos: list[int], be: int = 3) -> list[dict]:
    rows = []
    for mode in MODES:
        for mo in mos:
            tau = fraction_tau(mode, so, mo)
            wait = expected_cap_wait_slots(mode, so, mo)
            notes = []
            if so == 3 and (mode, mo) in PUBLISHED_TAU:
                notes.append(f"published CAP fraction {PUBLISHED_TAU[(mode, mo)]} disagrees with the "
                             f"CAP count; exact value {tau}")
            if so == 3 and (mode, mo) in PUBLISHED_WAIT:
                notes.append(f"published wait {PUBLISHED_WAIT[(mode, mo)]} slots disagrees with the "
                             f"NCR/CR average; exact value {wait}")
            if mode == "dcr":
                notes.append("interval between NCR and CR")
            rows.append({
                "mode": mode, "so": so, "mo": mo,
                "tau": _fmt(tau),
                "tau_exact": str(tau) if not isinstance(tau, tuple) else "..".join(map(str, tau)),
                "wait_slots": _fmt(wait),
                "wait_exact": str(wait) if not isinstance(wait, tuple) else "..".join(map(str, wait)),
                "access_time_slots": _fmt(_access_slots(mode, so, mo, be)),
                "dwell_ms": _fmt(theoretical_dwell_ms(mode, so, mo)),
                "notes": "; ".join(notes),
            })
    return rows


def _emit_csv(rows: list[dict], path: str | None) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_analytics(args) -> int:
    _emit_csv(analytics_rows(args.so, args.mo, args.be), args.out)
    return 0


def cmd_surface(args) -> int:
    n_sf = 2 ** (args.mo - args.so)
    ncap = args.ncap or list(range(1, n_sf + 1))
    rows = [
        {"n_cap": str(n), "slots_per_cap": str(s), "access_time_slots": f"{float(v):.6f}"}
        for n, s, v in access_time_surface(args.so, args.mo, args.be, ncap, args.slots, args.denominator)
    ]
    _emit_csv(rows, args.out)
    return 0


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "analytics": cmd_analytics, "surface": cmd_surface}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
