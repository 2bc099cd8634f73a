import math

import pytest
from hypothesis import given, strategies as st

from dsme_capr.metrics import (
    ConservationError,
    InsufficientReplications,
    MetricsRecord,
    TruncatedTrace,
    aggregate,
    reduce,
    t_interval,
    write_summary,
)
from dsme_capr.sim import Trace

META = {"mode": "ncr", "so": 3, "mo": 7, "bo": 7, "pattern": "rate", "delta": 1, "nodes": 2, "duration_s": 1.0}


def toy_trace(delivered=7, dropped=3, end=True):
    tr = Trace(dict(META))
    tr.add(0, "gen", 1, delivered + dropped)
    for pid in range(delivered):
        tr.add(100 + pid, "deliver", 0, pid, 1, 0)
    # one MSF window of queue length 2 for 50 symbols then 0 for 50
    tr.add(100, "q", 1, 1, 0, 1.0, 100)
    tr.add(300, "cmd", 1, "request", "alloc", 31.25, 0)
    tr.add(400, "maxgts", 1, 1, 3, 3.0)
    if end:
        tr.add(400, "end", -1, delivered + dropped, delivered, dropped, 0, 0)
    return tr


def test_prr_from_toy_trace():
    rec = reduce(toy_trace())
    assert rec.prr == pytest.approx(0.7)
    assert rec.mean_queue_by_hop == {1: 1.0}
    assert rec.max_gts_by_node == {1: 3}
    assert rec.max_per_bi_by_node == {1: 3.0}
    assert rec.mean_dwell_ms() == pytest.approx(0.5)


def test_truncated_trace_is_rejected():
    with pytest.raises(TruncatedTrace):
        reduce(toy_trace(end=False))


def test_conservation_checked():
    tr = toy_trace()
    tr.records[-1] = (400, "end", -1, 11, 7, 3, 0, 0)
    with pytest.raises(ConservationError):
        reduce(tr)


def test_t_interval_two_values():
    mean, lo, hi = t_interval([0.4, 0.6])
    assert mean == pytest.approx(0.5)
    # t(0.975, 1) = 12.706, s = 0.1414, n = 2
    assert hi - mean == pytest.approx(12.706 * math.sqrt(0.02) / math.sqrt(2), rel=1e-4)
    assert mean - lo == pytest.approx(hi - mean)


def test_t_interval_needs_two():
    with pytest.raises(InsufficientReplications):
        t_interval([0.5])


@given(st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_interval_width_shrinks_with_repetition(values):
    _, lo1, hi1 = t_interval(values)
    _, lo2, hi2 = t_interval(values * 4)
    assert hi2 - lo2 <= hi1 - lo1 + 1e-12


def record(prr, seed):
    return MetricsRecord(prr, 10, 7, 3, 0, 0, {1: 1.0}, {1: 3.0}, {1: 3}, {1: 1},
                         {"request": [2.0]}, {**META, "seed": seed, "_mean_queue_nonsink": 1.0})


def test_identical_records_give_zero_width(tmp_path):
    rows = aggregate([record(0.7, s) for s in range(3)])
    prr = next(r for r in rows if r.metric == "prr")
    assert prr.n == 3 and prr.mean == pytest.approx(0.7)
    assert prr.ci_hi - prr.ci_lo == pytest.approx(0, abs=1e-12)
    write_summary(rows, tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0]
    assert header.endswith("metric,hop,n,mean,ci_lo,ci_hi")


def test_aggregate_needs_records():
    with pytest.raises(InsufficientReplications):
        aggregate([])
