"""Frame structure of IEEE 802.15.4 DSME: beacon intervals, multisuperframes,
superframes and the classification of their 16 time slots.

All timing derives from the three orders (SO, MO, BO) and the operating mode.
A layout covers one period of the frame structure, which is one beacon
interval for NCR, CR and DCR and two beacon intervals for ACR.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

SLOTS_PER_SF = 16
CAP_FIRST, CAP_LAST = 1, 8  # slot indices of the CAP inside a superframe
CFP_FIRST = 9
BASE_SLOT_SYMBOLS = 60  # aBaseSlotDuration
SYMBOL_US = 16  # 62.5 ksymbol/s at 2.4 GHz
NUM_CHANNELS = 16


class ConfigError(ValueError):
    """Invalid protocol or scenario configuration."""


class Mode(str, enum.Enum):
    NCR = "ncr"
    CR = "cr"
    ACR = "acr"
    DCR = "dcr"

    @classmethod
    def parse(cls, value: "Mode | str") -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown mode {value!r}") from None


class SlotKind(enum.Enum):
    BEACON = "beacon"
    CAP = "cap"
    CFP = "cfp"
    # CAP slot that DCR may turn into a GTS at run time; behaves as CAP until then
    CAP_GTS_ELIGIBLE = "cap_gts_eligible"

    @property
    def is_cap(self) -> bool:
        return self is SlotKind.CAP or self is SlotKind.CAP_GTS_ELIGIBLE


@dataclass(frozen=True)
class ProtocolConfig:
    so: int = 3
    mo: int = 4
    bo: int = 7
    mode: Mode = Mode.NCR
    be: int = 3
    unit_backoff: int = 20
    symbol_duration: int = SYMBOL_US
    # ACR: the beacon interval with index 0 uses the CR pattern
    acr_first_bi_cr: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if min(self.so, self.mo, self.bo) < 0:
            raise ConfigError("orders must be non-negative")
        if self.so > self.mo:
            raise ConfigError(f"SO ({self.so}) must not exceed MO ({self.mo})")
        if self.mo > self.bo:
            raise ConfigError(f"MO ({self.mo}) must not exceed BO ({self.bo})")
        if self.be < 0:
            raise ConfigError("BE must be >= 0")
        if self.unit_backoff <= 0:
            raise ConfigError("unit_backoff must be positive")

    @property
    def n_sf(self) -> int:
        return 2 ** (self.mo - self.so)

    @property
    def n_msf(self) -> int:
        return 2 ** (self.bo - self.mo)

    @property
    def n_sf_bi(self) -> int:
        return 2 ** (self.bo - self.so)

    @property
    def n_ts(self) -> int:
        return SLOTS_PER_SF * self.n_sf


@dataclass(frozen=True)
class TimingTable:
    symbols_per_slot: int
    symbols_per_sf: int
    symbols_per_msf: int
    symbols_per_bi: int
    symbol_duration: int = SYMBOL_US

    @classmethod
    def from_config(cls, config: ProtocolConfig) -> "TimingTable":
        slot = BASE_SLOT_SYMBOLS * 2**config.so
        sf = SLOTS_PER_SF * slot
        return cls(
            symbols_per_slot=slot,
            symbols_per_sf=sf,
            symbols_per_msf=sf * config.n_sf,
            symbols_per_bi=sf * config.n_sf_bi,
            symbol_duration=config.symbol_duration,
        )

    @property
    def slot_duration_us(self) -> int:
        return self.symbols_per_slot * self.symbol_duration

    @property
    def sf_duration_us(self) -> int:
        return self.symbols_per_sf * self.symbol_duration

    @property
    def msf_duration_us(self) -> int:
        return self.symbols_per_msf * self.symbol_duration

    @property
    def bi_duration_us(self) -> int:
        return self.symbols_per_bi * self.symbol_duration


@dataclass(frozen=True)
class FrameLayout:
    config: ProtocolConfig
    slots: tuple[SlotKind, ...]
    period_bis: int

    @property
    def n_sf(self) -> int:
        return self.config.n_sf

    @property
    def n_msf(self) -> int:
        return self.config.n_msf

    @property
    def n_sf_bi(self) -> int:
        return self.config.n_sf_bi

    @property
    def n_ts(self) -> int:
        return self.config.n_ts

    @property
    def slots_per_bi(self) -> int:
        return SLOTS_PER_SF * self.n_sf_bi

    def bi_slots(self, bi_index: int) -> tuple[SlotKind, ...]:
        start = (bi_index % self.period_bis) * self.slots_per_bi
        return self.slots[start : start + self.slots_per_bi]

    def count(self, *kinds: SlotKind) -> int:
        return sum(1 for k in self.slots if k in kinds)


class SlotPosition(NamedTuple):
    bi_index: int
    msf_index: int
    sf_index: int
    slot_index: int
    kind: SlotKind


def _superframe(cap: bool, eligible: bool = False) -> list[SlotKind]:
    if cap:
        fill = SlotKind.CAP_GTS_ELIGIBLE if eligible else SlotKind.CAP
        return [SlotKind.BEACON] + [fill] * 8 + [SlotKind.CFP] * 7
    return [SlotKind.BEACON] + [SlotKind.CFP] * 15


def _bi_pattern(config: ProtocolConfig, reduced: bool, dcr: bool = False) -> list[SlotKind]:
    out: list[SlotKind] = []
    for _ in range(config.n_msf):
        for sf in range(config.n_sf):
            first = sf == 0
            out += _superframe(cap=first or not reduced, eligible=dcr and not first)
    return out


def acr_bi_is_reduced(config: ProtocolConfig, bi_index: int) -> bool:
    """Whether beacon interval ``bi_index`` runs the CR pattern under ACR."""
    even = bi_index % 2 == 0
    return even if config.acr_first_bi_cr else not even


def derive_layout(config: ProtocolConfig) -> FrameLayout:
    mode = config.mode
    if mode is Mode.NCR:
        return FrameLayout(config, tuple(_bi_pattern(config, reduced=False)), 1)
    if mode is Mode.CR:
        return FrameLayout(config, tuple(_bi_pattern(config, reduced=True)), 1)
    if mode is Mode.DCR:
        return FrameLayout(config, tuple(_bi_pattern(config, reduced=False, dcr=True)), 1)
    slots: list[SlotKind] = []
    for bi in range(2):
        slots += _bi_pattern(config, reduced=acr_bi_is_reduced(config, bi))
    return FrameLayout(config, tuple(slots), 2)


@dataclass(frozen=True)
class GtsCapacity:
    per_msf: Fraction
    per_bi: Fraction
    dcr_extra_per_msf: int

    @property
    def max_per_msf(self) -> Fraction:
        """Upper bound on GTSs a single node can hold in one MSF schedule."""
        return self.per_msf + self.dcr_extra_per_msf


def gts_capacity(config: ProtocolConfig) -> GtsCapacity:
    n = config.n_sf
    ncr = 7 * n
    cr = 7 + 15 * (n - 1)
    extra = 8 * (n - 1)
    mode = config.mode
    if mode is Mode.CR:
        per_msf = Fraction(cr)
    elif mode is Mode.ACR:
        per_msf = Fraction(ncr + cr, 2)
    else:
        per_msf = Fraction(ncr)
    return GtsCapacity(
        per_msf=per_msf,
        per_bi=per_msf * config.n_msf,
        dcr_extra_per_msf=extra if mode is Mode.DCR else 0,
    )


def slot_at(layout: FrameLayout, timing: TimingTable, time_us) -> SlotPosition:
    if time_us < 0:
        raise ValueError("time must be non-negative")
    slot_us = timing.slot_duration_us
    absolute = int(time_us // slot_us)
    per_bi = layout.slots_per_bi
    bi_index, in_bi = divmod(absolute, per_bi)
    sf_in_bi, slot_index = divmod(in_bi, SLOTS_PER_SF)
    msf_index, sf_index = divmod(sf_in_bi, layout.n_sf)
    kind = layout.slots[(absolute % (per_bi * layout.period_bis))]
    return SlotPosition(bi_index, msf_index, sf_index, slot_index, kind)
