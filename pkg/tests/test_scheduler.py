import math

import pytest
from hypothesis import given, settings, strategies as st

from dsme_capr.frame_structure import ConfigError, Mode
from dsme_capr.gts import GtsKind
from dsme_capr.scheduler import (
    LinkEstimate,
    SchedulerConfig,
    plan_negotiations,
    target_slots,
    update_estimate,
)

PLAIN = SchedulerConfig(prime_with_first_sample=False)


def est(**kw):
    kw.setdefault("node", 1)
    kw.setdefault("parent", 0)
    return LinkEstimate(**kw)


def test_update_examples():
    assert update_estimate(est(), 10, PLAIN).ewma == pytest.approx(1.0)
    assert update_estimate(est(ewma=7.0), 7, PLAIN).ewma == pytest.approx(7.0)


@given(st.floats(0.01, 1.0), st.integers(0, 50), st.integers(1, 60))
def test_geometric_convergence(alpha, c, k):
    cfg = SchedulerConfig(alpha=alpha, prime_with_first_sample=False)
    e = est(alpha=alpha)
    for _ in range(k):
        e = update_estimate(e, c, cfg)
    assert e.ewma == pytest.approx(c * (1 - (1 - alpha) ** k), rel=1e-9, abs=1e-9)


def test_first_sample_primes_average():
    e = update_estimate(est(), 12, SchedulerConfig())
    assert e.ewma == 12
    assert update_estimate(e, 2, SchedulerConfig()).ewma == pytest.approx(11.0)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        update_estimate(est(), -1)
    with pytest.raises(ValueError):
        est(ewma=-0.5)
    with pytest.raises(ConfigError):
        SchedulerConfig(alpha=0)
    with pytest.raises(ConfigError):
        SchedulerConfig(expiration_msfs=0)


def test_target_examples():
    cfg = SchedulerConfig(hysteresis_margin=1)
    assert target_slots(est(ewma=2.3, allocated_cfp=2), cfg) == 0
    assert target_slots(est(ewma=4.0, allocated_cfp=2), cfg) == 2
    # the last slot stays until it expires
    assert target_slots(est(ewma=0.0, allocated_cfp=1, idle_msfs=3), cfg) == 0
    assert target_slots(est(ewma=0.0, allocated_cfp=1, expired_cfp=1, idle_msfs=8), cfg) == -1


def test_release_needs_expired_slots():
    cfg = SchedulerConfig(hysteresis_margin=1)
    assert target_slots(est(ewma=1.0, allocated_cfp=6), cfg) == 0
    assert target_slots(est(ewma=1.0, allocated_cfp=6, expired_cfp=2), cfg) == -2


@given(st.floats(0.0, 40.0), st.integers(0, 3))
@settings(max_examples=80)
def test_constant_demand_converges_without_oscillation(c, margin):
    cfg = SchedulerConfig(alpha=0.5, hysteresis_margin=margin, prime_with_first_sample=False)
    e = est(alpha=0.5)
    alloc, history = 0, []
    for _ in range(200):
        e = update_estimate(e, c, cfg)
        # slots are used whenever there is demand, so none expire
        change = target_slots(LinkEstimate(1, 0, ewma=e.ewma, alpha=0.5, allocated_cfp=alloc), cfg)
        alloc += change
        history.append(alloc)
    tail = history[-50:]
    assert len(set(tail)) == 1
    assert abs(tail[0] - math.ceil(c - 1e-9)) <= margin


def test_ncr_drops_surplus():
    e = est(ewma=10.0, allocated_cfp=2, free_cfp=3, hop=1)
    (only,) = plan_negotiations("ncr", [e], SchedulerConfig())
    assert (only.kind, only.count) == (GtsKind.CFP, 3)


def test_dcr_cap_only_when_cfp_exhausted():
    cfg = SchedulerConfig()
    full = est(ewma=7.0, allocated_cfp=4, free_cfp=0, free_cap=8)
    assert [(i.kind, i.count) for i in plan_negotiations("dcr", [full], cfg)] == [(GtsKind.CAP, 3)]
    room = est(ewma=5.0, allocated_cfp=2, free_cfp=1, free_cap=8)
    assert [i.kind for i in plan_negotiations("dcr", [room], cfg)] == [GtsKind.CFP]


def test_acr_cfp_before_cap():
    cfg = SchedulerConfig(hysteresis_margin=1)
    e = est(ewma=4.0, allocated_cfp=2, free_cfp=1, free_cap=8)
    plan = plan_negotiations("acr", [e], cfg)
    assert [(i.action, i.kind, i.count) for i in plan] == [
        ("allocate", GtsKind.CFP, 1), ("allocate", GtsKind.CAP, 1)]


estimates = st.lists(
    st.builds(
        LinkEstimate,
        node=st.integers(1, 30), parent=st.just(0), ewma=st.floats(0, 30),
        allocated_cfp=st.integers(0, 10), allocated_cap=st.integers(0, 10),
        expired_cfp=st.integers(0, 3), expired_cap=st.integers(0, 3),
        free_cfp=st.integers(0, 10), free_cap=st.integers(0, 10), hop=st.integers(1, 4),
    ),
    max_size=12,
)


@given(estimates, st.sampled_from(list(Mode)))
def test_plan_properties(ests, mode):
    cfg = SchedulerConfig()
    plan = plan_negotiations(mode, ests, cfg)
    assert plan == plan_negotiations(mode, ests, cfg)
    groups = [(i.action, i.kind) for i in plan]
    order = [("allocate", GtsKind.CFP), ("allocate", GtsKind.CAP),
             ("deallocate", GtsKind.CAP), ("deallocate", GtsKind.CFP)]
    ranks = [order.index(g) for g in groups]
    assert ranks == sorted(ranks)
    by_node = {e.node: e for e in ests}
    for i in plan:
        assert i.count > 0
        if mode in (Mode.NCR, Mode.CR):
            assert i.kind is GtsKind.CFP or i.action == "deallocate"
        if mode is Mode.DCR and i.action == "allocate" and i.kind is GtsKind.CAP:
            assert by_node[i.node].free_cfp == 0
