"""Reduce simulation traces to PRR, queue length, allocated GTSs and dwell
time, and aggregate replications into Student-t confidence intervals."""

from __future__ import annotations

import csv
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from scipy import stats

from .sim import SYMBOLS_PER_SECOND, Trace

SYMBOL_MS = 1000 / SYMBOLS_PER_SECOND
CONFIG_KEYS = ("mode", "so", "mo", "bo", "pattern", "delta", "nodes", "duration_s")
# dwell of the frames that open a negotiation; the headline adaptability metric
NEGOTIATION = "request"


class TruncatedTrace(ValueError):
    pass


class InsufficientReplications(ValueError):
    pass


class ConservationError(AssertionError):
    pass


@dataclass
class MetricsRecord:
    prr: float
    generated: int
    delivered: int
    dropped: int
    residual: int
    violations: int
    mean_queue_by_hop: dict[int, float]
    max_gts_by_hop: dict[int, float]
    max_gts_by_node: dict[int, int]
    hop_by_node: dict[int, int]
    dwell_ms: dict[str, list[float]]
    metadata: dict = field(default_factory=dict)
    # peak GTSs per MSF schedule usable in an average BI (ACR counts CAP-GTSs half)
    max_per_bi_by_node: dict[int, float] = field(default_factory=dict)

    @property
    def config(self) -> tuple:
        return tuple(self.metadata.get(k) for k in CONFIG_KEYS)

    def mean_dwell_ms(self, cls: str = NEGOTIATION) -> float:
        xs = self.dwell_ms.get(cls, [])
        return statistics.fmean(xs) if xs else math.nan

    def mean_queue(self, exclude_sink: bool = True) -> float:
        """Queue length averaged over all (non-sink) nodes."""
        return self.metadata["_mean_queue_all" if not exclude_sink else "_mean_queue_nonsink"]


def _wmean(acc: list) -> float:
    return acc[0] / acc[1] if acc[1] else 0.0


def reduce(trace: Trace, since_s: float = 0.0, queue_estimator: str = "time") -> MetricsRecord:
    """Metrics of one run.

    ``since_s`` restricts PRR, queue samples and dwell to packets and frames
    created at or after that time (steady-state measurement).  The queue
    length is the exact time average per MSF window (``"time"``) or the
    instantaneous length seen at each MSF boundary (``"boundary"``).
    """
    if queue_estimator not in ("time", "boundary"):
        raise ValueError("queue_estimator must be 'time' or 'boundary'")
    if not trace.complete:
        raise TruncatedTrace("trace has no end record")
    t0 = since_s * SYMBOLS_PER_SECOND
    gen = delivered_w = 0
    # (weighted sum, total weight) of time-averaged queue samples
    queues: dict[int, list[float]] = defaultdict(lambda: [0.0, 0])
    q_all = [0.0, 0]
    q_nonsink = [0.0, 0]
    max_node: dict[int, int] = {}
    max_bi: dict[int, float] = {}
    hop_of: dict[int, int] = {}
    dwell: dict[str, list[float]] = defaultdict(list)
    for rec in trace.records:
        ev = rec[1]
        if ev == "gen":
            if rec[0] >= t0:
                gen += rec[3]
        elif ev == "deliver":
            if rec[5] >= t0:
                delivered_w += 1
        elif ev == "q":
            _, _, _, hop, now, mean, span = rec
            if rec[0] - span >= t0:
                value, weight = (mean, span) if queue_estimator == "time" else (now, 1)
                sinks = [queues[hop], q_all] + ([q_nonsink] if hop > 0 else [])
                for acc in sinks:
                    acc[0] += value * weight
                    acc[1] += weight
        elif ev == "cmd":
            if rec[0] - rec[5] >= t0:
                dwell[rec[3]].append(rec[5] * SYMBOL_MS)
        elif ev == "maxgts":
            max_node[rec[2]] = rec[4]
            max_bi[rec[2]] = rec[5]
            hop_of[rec[2]] = rec[3]
    _, _, _, generated, delivered, dropped, residual, violations = trace.records[-1]
    if generated != delivered + dropped + residual:
        raise ConservationError(
            f"generated {generated} != delivered {delivered} + dropped {dropped} + residual {residual}"
        )
    by_hop: dict[int, list[int]] = defaultdict(list)
    for n, v in max_node.items():
        by_hop[hop_of[n]].append(v)
    meta = dict(trace.metadata)
    meta["_mean_queue_all"] = _wmean(q_all)
    meta["_mean_queue_nonsink"] = _wmean(q_nonsink)
    return MetricsRecord(
        prr=delivered_w / gen if gen else math.nan,
        generated=generated,
        delivered=delivered,
        dropped=dropped,
        residual=residual,
        violations=violations,
        mean_queue_by_hop={h: _wmean(v) for h, v in sorted(queues.items())},
        max_gts_by_hop={h: statistics.fmean(v) for h, v in sorted(by_hop.items())},
        max_gts_by_node=dict(sorted(max_node.items())),
        hop_by_node=dict(sorted(hop_of.items())),
        dwell_ms=dict(dwell),
        metadata=meta,
        max_per_bi_by_node=dict(sorted(max_bi.items())),
    )


@dataclass(frozen=True)
class SummaryRow:
    config: tuple
    metric: str
    hop: str
    n: int
    mean: float
    ci_lo: float
    ci_hi: float


def t_interval(values: list[float], confidence: float = 0.95) -> tuple[float, float, float]:
    """Mean and two-sided Student-t confidence interval."""
    n = len(values)
    if n < 2:
        raise InsufficientReplications("need at least two replications")
    mean = statistics.fmean(values)
    sd = statistics.stdev(values)
    half = stats.t.ppf((1 + confidence) / 2, n - 1) * sd / math.sqrt(n)
    return mean, mean - half, mean + half


def _cells(rec: MetricsRecord) -> Iterable[tuple[str, str, float]]:
    yield "prr", "all", rec.prr
    yield "mean_queue", "all", rec.mean_queue()
    for h, v in rec.mean_queue_by_hop.items():
        yield "mean_queue", str(h), v
    for h, v in rec.max_gts_by_hop.items():
        yield "max_gts", str(h), v
    for cls, xs in sorted(rec.dwell_ms.items()):
        if xs:
            yield f"dwell_ms_{cls}", "all", statistics.fmean(xs)


def aggregate(records: Iterable[MetricsRecord], confidence: float = 0.95) -> list[SummaryRow]:
    cells: dict[tuple, list[float]] = defaultdict(list)
    for rec in records:
        for metric, hop, value in _cells(rec):
            if not math.isnan(value):
                cells[(rec.config, metric, hop)].append(value)
    if not cells:
        raise InsufficientReplications("no records")
    rows = []
    for (config, metric, hop), values in sorted(cells.items(), key=lambda kv: tuple(map(str, kv[0]))):
        mean, lo, hi = t_interval(values, confidence)
        rows.append(SummaryRow(config, metric, hop, len(values), mean, lo, hi))
    return rows


def write_summary(rows: Iterable[SummaryRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*CONFIG_KEYS, "metric", "hop", "n", "mean", "ci_lo", "ci_hi"])
        for r in rows:
            w.writerow([*r.config, r.metric, r.hop, r.n, f"{r.mean:.6g}", f"{r.ci_lo:.6g}", f"{r.ci_hi:.6g}"])


def write_dwell(records: Iterable[MetricsRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*CONFIG_KEYS, "seed", "class", "count", "mean_ms", "median_ms", "max_ms"])
        for rec in records:
            for cls, xs in sorted(rec.dwell_ms.items()):
                if xs:
                    w.writerow([*rec.config, rec.metadata.get("seed"), cls, len(xs),
                                f"{statistics.fmean(xs):.4f}", f"{statistics.median(xs):.4f}", f"{max(xs):.4f}"])


def write_gts(records: Iterable[MetricsRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*CONFIG_KEYS, "seed", "node", "hop", "max_gts", "max_gts_per_bi"])
        for rec in records:
            for node, v in rec.max_gts_by_node.items():
                w.writerow([*rec.config, rec.metadata.get("seed"), node, rec.hop_by_node[node], v,
                            rec.max_per_bi_by_node.get(node, v)])
