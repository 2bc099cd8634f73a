"""Closed-form agility/throughput metrics for the CAP reduction modes.

Everything is computed in exact rational arithmetic; callers convert to float
for presentation.  DCR has no point value: it moves between NCR and CR at run
time, so its results are returned as ``(low, high)`` intervals.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .frame_structure import (
    BASE_SLOT_SYMBOLS,
    SLOTS_PER_SF,
    ConfigError,
    FrameLayout,
    Mode,
    ProtocolConfig,
    TimingTable,
)

Number = Fraction | int


def _check_orders(so: int, mo: int) -> None:
    if so < 0 or so > mo:
        raise ConfigError(f"need 0 <= SO <= MO, got SO={so} MO={mo}")


@dataclass(frozen=True)
class CapProfile:
    """Average number of CAPs per MSF and CAP slots per MSF."""

    n_cap: Fraction
    s_cap: Fraction

    def __post_init__(self):
        object.__setattr__(self, "n_cap", Fraction(self.n_cap))
        object.__setattr__(self, "s_cap", Fraction(self.s_cap))
        if self.n_cap <= 0:
            raise ValueError("n_cap must be positive")
        if self.s_cap < 0 or self.s_cap / self.n_cap > 8:
            raise ValueError("a CAP holds at most 8 slots")

    def validate_for(self, n_sf: int) -> None:
        if self.n_cap > n_sf or self.s_cap > 8 * n_sf:
            raise ValueError(f"profile {self} does not fit {n_sf} superframes")

    @classmethod
    def for_mode(cls, mode: Mode | str, so: int, mo: int) -> "CapProfile":
        mode = Mode.parse(mode)
        n_sf = 2 ** (mo - so)
        if mode is Mode.NCR:
            return cls(n_sf, 8 * n_sf)
        if mode is Mode.CR:
            return cls(1, 8)
        if mode is Mode.ACR:
            return cls(Fraction(n_sf + 1, 2), Fraction(8 * n_sf + 8, 2))
        raise ValueError("DCR has no fixed CAP profile")


def tau_from_profile(profile: CapProfile, n_sf: int) -> Fraction:
    """Fraction of CFP slots in an MSF (beacon slots excluded)."""
    n_ts = SLOTS_PER_SF * n_sf
    return (n_ts - profile.s_cap - n_sf) / Fraction(n_ts)


def tau_closed_form(mode: Mode | str, so: int, mo: int) -> Fraction:
    mode = Mode.parse(mode)
    half_inv = Fraction(1, 2 ** (mo - so))
    if mode is Mode.NCR:
        return Fraction(7, 16)
    if mode is Mode.CR:
        return Fraction(15, 16) - half_inv / 2
    if mode is Mode.ACR:
        return Fraction(11, 16) - half_inv / 4
    raise ValueError("DCR has no closed form; use fraction_tau")


def fraction_tau(mode: Mode | str, so: int, mo: int):
    _check_orders(so, mo)
    mode = Mode.parse(mode)
    n_sf = 2 ** (mo - so)
    if mode is Mode.DCR:
        return (fraction_tau(Mode.NCR, so, mo), fraction_tau(Mode.CR, so, mo))
    return tau_from_profile(CapProfile.for_mode(mode, so, mo), n_sf)


def wait_slots_sum(n_cap: Number, s_cap: Number, n_sf: int) -> Fraction:
    """Slot-level expected CAP wait for evenly spaced CAPs.

    Each of the ``n_cap`` gaps between CAPs is ``(n_ts - s_cap) / n_cap``
    slots long and a slot ``j`` slots before the next CAP waits ``j`` slots,
    so the per-gap sum is multiplied by the number of gaps before averaging
    over all ``n_ts`` slots.
    """
    n_ts = SLOTS_PER_SF * n_sf
    gap = Fraction(n_ts - Fraction(s_cap)) / Fraction(n_cap)
    if gap.denominator != 1:
        raise ValueError("gap between CAPs must be a whole number of slots")
    g = gap.numerator
    return Fraction(n_cap) * Fraction(g * (g + 1), 2) / n_ts


def wait_slots_closed_form(mode: Mode | str, so: int, mo: int) -> Fraction:
    mode = Mode.parse(mode)
    k = mo - so
    if mode is Mode.NCR:
        return Fraction(9, 4)
    if mode is Mode.CR:
        return 2 ** (k + 3) + Fraction(7, 4) / 2**k - Fraction(15, 2)
    if mode is Mode.ACR:
        return 2 ** (k + 2) + Fraction(7, 8) / 2**k - Fraction(21, 8)
    raise ValueError("DCR has no closed form")


def expected_cap_wait_slots(mode: Mode | str, so: int, mo: int):
    _check_orders(so, mo)
    mode = Mode.parse(mode)
    n_sf = 2 ** (mo - so)
    if mode is Mode.DCR:
        return (
            expected_cap_wait_slots(Mode.NCR, so, mo),
            expected_cap_wait_slots(Mode.CR, so, mo),
        )
    ncr = wait_slots_sum(n_sf, 8 * n_sf, n_sf)
    cr = wait_slots_sum(1, 8, n_sf)
    if mode is Mode.NCR:
        return ncr
    if mode is Mode.CR:
        return cr
    return (ncr + cr) / 2


def brute_force_wait_slots(layout: FrameLayout) -> Fraction:
    """Average number of slots until the next CAP slot, by enumeration.

    Walks the layout period cyclically: a CAP slot waits 0, any other slot
    waits the distance to the next CAP slot.
    """
    slots = layout.slots
    n = len(slots)
    caps = [i for i, k in enumerate(slots) if k.is_cap]
    if not caps:
        raise ValueError("layout has no CAP slot")
    next_cap = caps[0] + n  # first CAP of the following period
    total = 0
    for idx in range(n - 1, -1, -1):
        if slots[idx].is_cap:
            next_cap = idx
        else:
            total += next_cap - idx
    return Fraction(total, n)


@dataclass(frozen=True)
class AccessTimeParams:
    be: int
    d_ub: int
    s_sf: int
    s_c: Fraction
    omega: Fraction
    p_cap: Fraction

    @classmethod
    def build(cls, profile: CapProfile, so: int, mo: int, be: int, d_ub: int = 20) -> "AccessTimeParams":
        n_sf = 2 ** (mo - so)
        profile.validate_for(n_sf)
        slot = BASE_SLOT_SYMBOLS * 2**so
        return cls(
            be=be,
            d_ub=d_ub,
            s_sf=SLOTS_PER_SF * slot,
            s_c=profile.s_cap / profile.n_cap * slot,
            omega=Fraction(n_sf) / profile.n_cap,
            p_cap=profile.s_cap / (SLOTS_PER_SF * n_sf),
        )

    @property
    def backoff_slots_per_cap(self) -> int:
        return int(self.s_c // self.d_ub)


def backoff_delay(s: int, i: int, p: AccessTimeParams) -> Fraction:
    """Symbols spent backing off ``i`` periods from backoff slot ``s`` of a CAP."""
    d = p.d_ub
    if d * (s + i) < p.s_c:
        return Fraction(i * d)
    span = p.omega * p.s_sf
    reached = Fraction(d * (s + i))
    wraps = reached // p.s_c
    return span - d * s + reached % p.s_c + span * wraps


def csma_backoff_expectation(s: int, params: AccessTimeParams, denominator: str = "uniform") -> Fraction:
    """Mean backoff over all draws ``i`` in ``0 .. 2**BE - 1``.

    ``denominator="published"`` divides by ``2**BE - 1`` instead of the number of
    draws; it reproduces the published surface annotations but is not a mean.
    """
    if not 0 <= s < max(params.backoff_slots_per_cap, 1):
        raise ValueError(f"backoff slot {s} outside the CAP")
    draws = 2**params.be
    total = sum((backoff_delay(s, i, params) for i in range(draws)), Fraction(0))
    if denominator == "uniform":
        return total / draws
    if denominator == "published":
        return total / (draws - 1) if draws > 1 else total
    raise ValueError(f"unknown denominator {denominator!r}")


@dataclass(frozen=True)
class ChannelAccess:
    t_cap: Fraction
    t_cfp: Fraction
    t_c: Fraction
    total_symbols: Fraction
    total_slots: Fraction


def expected_channel_access(
    profile: CapProfile, so: int, mo: int, be: int = 3, d_ub: int = 20, denominator: str = "uniform"
) -> ChannelAccess:
    _check_orders(so, mo)
    if profile.s_cap == 0:
        raise ValueError("profile without CAP slots has no channel access")
    p = AccessTimeParams.build(profile, so, mo, be, d_ub)
    n_s = p.backoff_slots_per_cap
    t_cap = sum((csma_backoff_expectation(s, p, denominator) for s in range(n_s)), Fraction(0)) / n_s
    t_c = (1 + p.omega * p.s_sf - p.s_c) / 2
    t_cfp = t_c + csma_backoff_expectation(0, p, denominator)
    total = p.p_cap * t_cap + (1 - p.p_cap) * t_cfp
    return ChannelAccess(t_cap, t_cfp, t_c, total, total / (BASE_SLOT_SYMBOLS * 2**so))


def access_time_surface(
    so: int,
    mo: int,
    be: int,
    n_cap_grid: Iterable[Number],
    slots_per_cap_grid: Iterable[Number],
    denominator: str = "uniform",
) -> list[tuple[Fraction, Fraction, Fraction]]:
    n_caps = [Fraction(x) for x in n_cap_grid]
    per_cap = [Fraction(x) for x in slots_per_cap_grid]
    if not n_caps or not per_cap:
        raise ValueError("grids must be non-empty")
    rows = []
    for n_cap in n_caps:
        for spc in per_cap:
            res = expected_channel_access(CapProfile(n_cap, n_cap * spc), so, mo, be, denominator=denominator)
            rows.append((n_cap, spc, res.total_slots))
    return rows


def theoretical_dwell_ms(mode: Mode | str, so: int, mo: int):
    slot_ms = Fraction(TimingTable.from_config(ProtocolConfig(so=so, mo=mo, bo=mo)).slot_duration_us, 1000)
    wait = expected_cap_wait_slots(mode, so, mo)
    if isinstance(wait, tuple):
        return (wait[0] * slot_ms, wait[1] * slot_ms)
    return wait * slot_ms
