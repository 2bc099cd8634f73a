import pytest
from hypothesis import given, strategies as st

from dsme_capr.frame_structure import (
    ConfigError,
    Mode,
    ProtocolConfig,
    SlotKind,
    TimingTable,
    derive_layout,
    gts_capacity,
    slot_at,
)

B, C, F, E = SlotKind.BEACON, SlotKind.CAP, SlotKind.CFP, SlotKind.CAP_GTS_ELIGIBLE


@st.composite
def configs(draw, modes=tuple(Mode)):
    so = draw(st.integers(0, 4))
    mo = draw(st.integers(so, so + 4))
    bo = draw(st.integers(mo, mo + 2))
    return ProtocolConfig(so=so, mo=mo, bo=bo, mode=draw(st.sampled_from(modes)))


def sf_pattern(cap: bool, kind=C):
    return [B] + [kind] * 8 + [F] * 7 if cap else [B] + [F] * 15


def test_ncr_two_superframes():
    lay = derive_layout(ProtocolConfig(so=3, mo=4, bo=4, mode="ncr"))
    assert (lay.n_sf, lay.n_msf) == (2, 1)
    assert list(lay.slots) == sf_pattern(True) * 2


def test_cr_reduces_second_superframe():
    lay = derive_layout(ProtocolConfig(so=3, mo=4, bo=4, mode="cr"))
    assert list(lay.slots) == sf_pattern(True) + sf_pattern(False)


def test_single_superframe_cr_equals_ncr():
    for mode in Mode:
        lay = derive_layout(ProtocolConfig(so=3, mo=3, bo=3, mode=mode))
        assert lay.n_sf == 1
        base = derive_layout(ProtocolConfig(so=3, mo=3, bo=3, mode="ncr"))
        assert lay.bi_slots(0) == base.slots


def test_dcr_marks_eligible_slots_outside_first_superframe():
    lay = derive_layout(ProtocolConfig(so=3, mo=5, bo=5, mode="dcr"))
    assert list(lay.slots[:16]) == sf_pattern(True)
    for sf in range(1, 4):
        assert list(lay.slots[16 * sf:16 * sf + 16]) == sf_pattern(True, E)


def test_rejects_bad_orders():
    with pytest.raises(ConfigError):
        ProtocolConfig(so=4, mo=3, bo=7)
    with pytest.raises(ConfigError):
        ProtocolConfig(so=3, mo=7, bo=6)
    with pytest.raises(ConfigError):
        ProtocolConfig(mode="tsch")


@pytest.mark.parametrize("mode,per_bi", [("ncr", 112), ("cr", 232), ("acr", 172)])
def test_capacity_examples(mode, per_bi):
    assert gts_capacity(ProtocolConfig(so=3, mo=7, bo=7, mode=mode)).per_bi == per_bi


def test_dcr_extra_capacity():
    cap = gts_capacity(ProtocolConfig(so=3, mo=7, bo=7, mode="dcr"))
    assert cap.dcr_extra_per_msf == 120
    assert cap.max_per_msf == 232


def test_timing_at_so3():
    t = TimingTable.from_config(ProtocolConfig(so=3, mo=7, bo=7))
    assert t.symbols_per_slot == 480
    assert t.slot_duration_us == 7680
    assert t.symbols_per_sf == 960 * 8
    # 15.36 ms x 2^BO
    assert t.bi_duration_us == 15_360 * 2**7


def test_slot_at_examples():
    cfg = ProtocolConfig(so=3, mo=7, bo=7, mode="ncr")
    lay, t = derive_layout(cfg), TimingTable.from_config(cfg)
    assert tuple(slot_at(lay, t, 0)) == (0, 0, 0, 0, B)
    pos = slot_at(lay, t, 7680)
    assert (pos.slot_index, pos.kind) == (1, C)
    assert tuple(slot_at(lay, t, t.bi_duration_us)) == (1, 0, 0, 0, B)
    with pytest.raises(ValueError):
        slot_at(lay, t, -1)


@given(configs())
def test_layout_invariants(cfg):
    lay = derive_layout(cfg)
    assert len(lay.slots) == 16 * lay.n_sf_bi * lay.period_bis
    assert lay.period_bis == (2 if cfg.mode is Mode.ACR else 1)
    for sf in range(len(lay.slots) // 16):
        chunk = lay.slots[16 * sf:16 * sf + 16]
        assert chunk[0] is B and chunk.count(B) == 1
        sf_in_msf = sf % lay.n_sf
        if E in chunk:
            assert sf_in_msf != 0
        if sf_in_msf == 0:
            assert list(chunk) == sf_pattern(True)


@given(configs(modes=(Mode.NCR, Mode.CR, Mode.ACR)))
def test_cfp_count_matches_capacity(cfg):
    lay = derive_layout(cfg)
    cap = gts_capacity(cfg)
    cfp_per_bi = lay.count(F) / lay.period_bis
    assert cfp_per_bi == cap.per_bi


@given(configs(modes=(Mode.ACR,)), st.booleans())
def test_acr_alternates(cfg, first_cr):
    cfg = ProtocolConfig(so=cfg.so, mo=cfg.mo, bo=cfg.bo, mode="acr", acr_first_bi_cr=first_cr)
    lay = derive_layout(cfg)
    ncr = derive_layout(ProtocolConfig(so=cfg.so, mo=cfg.mo, bo=cfg.bo, mode="ncr")).slots
    cr = derive_layout(ProtocolConfig(so=cfg.so, mo=cfg.mo, bo=cfg.bo, mode="cr")).slots
    assert lay.bi_slots(0) == (cr if first_cr else ncr)
    assert lay.bi_slots(1) == (ncr if first_cr else cr)


@given(configs(), st.integers(0, 10**9))
def test_slot_at_is_periodic(cfg, time_us):
    lay, t = derive_layout(cfg), TimingTable.from_config(cfg)
    period = lay.period_bis * t.bi_duration_us
    a, b = slot_at(lay, t, time_us), slot_at(lay, t, time_us + period)
    assert a.kind is b.kind and a.slot_index == b.slot_index and a.sf_index == b.sf_index
