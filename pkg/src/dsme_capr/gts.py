"""Slot allocation bitmap (SAB), allocation counter table (ACT) and the
three-way GTS handshake (request / response / notify).

A ``GtsNode`` holds one node's view.  The handlers never touch other nodes:
they consume a ``GtsCommand`` and return the commands to send next, so the
simulator (or a test) decides what is delivered to whom.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .frame_structure import CAP_FIRST, CAP_LAST, CFP_FIRST, NUM_CHANNELS, SLOTS_PER_SF, Mode, ProtocolConfig

ALL_CHANNELS = (1 << NUM_CHANNELS) - 1


class GtsError(Exception):
    pass


class Exhausted(GtsError):
    """No free (slot, channel) tuple of the requested kind."""


class NoEligibleSuperframe(Exhausted):
    """The MSF has a single superframe, so no CAP may be converted."""


class NothingToDeallocate(GtsError):
    pass


class GtsKind(str, enum.Enum):
    CFP = "cfp_gts"
    CAP = "cap_gts"


class Direction(str, enum.Enum):
    TX = "tx"
    RX = "rx"


class EntryState(str, enum.Enum):
    PENDING = "pending"
    VALID = "valid"
    INVALID = "invalid"


class Phase(str, enum.Enum):
    IDLE = "idle"
    REQUEST_SENT = "request_sent"
    RESPONSE_SEEN = "response_seen"
    COMMITTED = "committed"
    ROLLED_BACK = "rolled_back"


_PHASE_NEXT = {
    Phase.IDLE: {Phase.REQUEST_SENT},
    Phase.REQUEST_SENT: {Phase.RESPONSE_SEEN},
    Phase.RESPONSE_SEEN: {Phase.COMMITTED},
    Phase.COMMITTED: set(),
    Phase.ROLLED_BACK: set(),
}


def lowest_channel(mask: int) -> int:
    return (mask & -mask).bit_length() - 1


# --- slot geometry ---------------------------------------------------------


def msf_slot(sf: int, slot: int) -> int:
    return sf * SLOTS_PER_SF + slot


def split_msf_slot(index: int) -> tuple[int, int]:
    return divmod(index, SLOTS_PER_SF)


def cfp_positions(config: ProtocolConfig) -> list[int]:
    """MSF slot indices usable by regular (CFP) GTSs, in allocation order."""
    out = []
    for sf in range(config.n_sf):
        first = CAP_FIRST if (config.mode is Mode.CR and sf > 0) else CFP_FIRST
        out += [msf_slot(sf, j) for j in range(first, SLOTS_PER_SF)]
    return sorted(out)


def cap_gts_positions(config: ProtocolConfig) -> list[int]:
    """CAP slots that ACR/DCR may use as GTS; never in the first superframe."""
    if config.mode not in (Mode.ACR, Mode.DCR):
        return []
    return [msf_slot(sf, j) for sf in range(1, config.n_sf) for j in range(CAP_FIRST, CAP_LAST + 1)]


def is_cap_gts_slot(index: int) -> bool:
    sf, j = split_msf_slot(index)
    return sf > 0 and CAP_FIRST <= j <= CAP_LAST


# --- SAB / ACT -------------------------------------------------------------


class SlotAllocationBitmap:
    """Per-slot channel occupancy seen by one node, plus the node's own busy slots.

    Always sized for the CR-mode MSF (16 slots per superframe) whatever the
    active mode.  ``busy`` records, per slot, which other radios are known to
    be taken (learned from overheard commits and from response frames), so a
    node does not propose slots its counterpart cannot serve.
    """

    def __init__(self, n_sf: int):
        self.n_slots = SLOTS_PER_SF * n_sf
        self.occupied = [0] * self.n_slots
        self.own_slots: set[int] = set()
        self.busy: dict[int, int] = {}

    def is_free(self, slot: int, channel: int) -> bool:
        return not (self.occupied[slot] >> channel) & 1

    def free_mask(self, slot: int) -> int:
        return ALL_CHANNELS & ~self.occupied[slot]

    def mark(self, slot: int, channel: int) -> None:
        self.occupied[slot] |= 1 << channel

    def clear(self, slot: int, channel: int) -> None:
        self.occupied[slot] &= ~(1 << channel)

    def is_busy(self, slot: int, node: int | None) -> bool:
        return node is not None and bool((self.busy.get(slot, 0) >> node) & 1)

    def mark_busy(self, slot: int, node: int) -> None:
        self.busy[slot] = self.busy.get(slot, 0) | (1 << node)

    def clear_busy(self, slot: int, node: int) -> None:
        bits = self.busy.get(slot, 0) & ~(1 << node)
        if bits:
            self.busy[slot] = bits
        else:
            self.busy.pop(slot, None)

    def set_node_slots(self, node: int, slots: Iterable[int]) -> None:
        """Replace what is known about ``node``'s busy slots."""
        for s in [s for s, bits in self.busy.items() if (bits >> node) & 1]:
            self.clear_busy(s, node)
        for s in slots:
            self.mark_busy(s, node)

    def copy(self) -> "SlotAllocationBitmap":
        other = SlotAllocationBitmap(1)
        other.n_slots = self.n_slots
        other.occupied = list(self.occupied)
        other.own_slots = set(self.own_slots)
        other.busy = dict(self.busy)
        return other

    def snapshot(self) -> tuple:
        return tuple(self.occupied), frozenset(self.own_slots)


@dataclass
class ActEntry:
    slot: int
    channel: int
    direction: Direction
    counterpart: int
    kind: GtsKind
    state: EntryState
    hs_id: tuple[int, int] | None = None
    seq: int = 0
    idle: int = 0
    used: bool = False
    active_from: int = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.slot, self.channel)


@dataclass
class Handshake:
    hs_id: tuple[int, int]
    op: str  # "alloc" | "dealloc"
    initiator: int
    responder: int
    kind: GtsKind
    num_slots: int
    phase: Phase = Phase.IDLE
    tuples: list[tuple[int, int]] = field(default_factory=list)
    deadline: int | None = None

    def advance(self, phase: Phase) -> None:
        if phase is not Phase.ROLLED_BACK and phase not in _PHASE_NEXT[self.phase]:
            raise GtsError(f"illegal handshake transition {self.phase.value} -> {phase.value}")
        self.phase = phase

    @property
    def open(self) -> bool:
        return self.phase not in (Phase.COMMITTED, Phase.ROLLED_BACK)


@dataclass
class GtsCommand:
    cls: str  # "request" | "response" | "notify"
    op: str  # "alloc" | "dealloc"
    hs_id: tuple[int, int]
    initiator: int
    responder: int
    kind: GtsKind
    num_slots: int = 0
    candidates: list[tuple[int, int]] = field(default_factory=list)
    tuples: list[tuple[int, int]] = field(default_factory=list)
    ok: bool = True
    # slots the sender's radio is committed to (responses only)
    busy_slots: tuple[int, ...] = ()

    @property
    def link(self) -> frozenset[int]:
        return frozenset((self.initiator, self.responder))


def candidate_slots(
    config: ProtocolConfig,
    kind: GtsKind,
    sab: SlotAllocationBitmap,
    rng: np.random.Generator | None = None,
    c_cap: int = 0,
    limit: int | None = None,
    counterpart: int | None = None,
) -> list[tuple[int, int]]:
    """Ordered ``(slot, free channel mask)`` candidates for a new GTS."""
    if kind is GtsKind.CFP:
        out = []
        for s in cfp_positions(config):
            if s in sab.own_slots or sab.is_busy(s, counterpart):
                continue
            mask = sab.free_mask(s)
            if mask:
                out.append((s, mask))
                if limit is not None and len(out) >= limit:
                    break
        return out
    if config.mode is Mode.ACR:
        out = []
        for s in cap_gts_positions(config):
            if s not in sab.own_slots and not sab.is_busy(s, counterpart) and sab.free_mask(s):
                out.append((s, sab.free_mask(s)))
        return out[:limit] if limit is not None else out
    if config.mode is not Mode.DCR:
        raise GtsError(f"CAP GTSs are not permitted in {config.mode.value}")
    work = sab.copy()
    out = []
    while limit is None or len(out) < limit:
        try:
            sf, j, _ = dcr_select_cap_slot(config, work, rng, c_cap, counterpart)
        except Exhausted:
            break
        s = msf_slot(sf, j)
        out.append((s, sab.free_mask(s) & ~(1 << c_cap)))
        work.own_slots.add(s)
    return out


def dcr_select_cap_slot(
    config: ProtocolConfig,
    sab: SlotAllocationBitmap,
    rng: np.random.Generator | None,
    c_cap: int = 0,
    counterpart: int | None = None,
) -> tuple[int, int, int]:
    """Pick ``(superframe, slot, channel)`` for a DCR CAP-GTS.

    A superframe other than the first of the MSF is chosen uniformly among
    those with a convertible slot, then its highest unconverted CAP slot,
    on the lowest free channel other than the CAP channel.
    """
    n_sf = config.n_sf
    if n_sf == 1:
        raise NoEligibleSuperframe("MO = SO leaves no reducible CAP")
    if sum(1 for s in sab.own_slots if is_cap_gts_slot(s)) >= 8 * (n_sf - 1):
        raise Exhausted("all CAP slots already converted")
    not_cap = ALL_CHANNELS & ~(1 << c_cap)
    choices: list[tuple[int, int, int]] = []
    for sf in range(1, n_sf):
        for j in range(CAP_LAST, CAP_FIRST - 1, -1):
            s = msf_slot(sf, j)
            if s in sab.own_slots or sab.is_busy(s, counterpart):
                continue
            mask = sab.free_mask(s) & not_cap
            if mask:
                choices.append((sf, j, lowest_channel(mask)))
                break
    if not choices:
        raise Exhausted("no convertible CAP slot left")
    pick = 0 if rng is None or len(choices) == 1 else int(rng.integers(len(choices)))
    return choices[pick]


def propose_allocation(
    config: ProtocolConfig,
    kind: GtsKind,
    sab: SlotAllocationBitmap,
    rng: np.random.Generator | None = None,
    c_cap: int = 0,
    counterpart: int | None = None,
) -> tuple[int, int]:
    """First ``(slot, channel)`` a node would propose for ``kind``."""
    cands = candidate_slots(config, kind, sab, rng, c_cap, limit=1, counterpart=counterpart)
    if not cands:
        raise Exhausted(f"no free {kind.value} tuple")
    slot, mask = cands[0]
    return slot, lowest_channel(mask)


def deallocation_order(entries: Iterable[ActEntry], mode: Mode) -> list[ActEntry]:
    """Release order: CAP-GTSs before CFP-GTSs, most recent allocation first."""
    prefer_cap = mode in (Mode.ACR, Mode.DCR)
    return sorted(entries, key=lambda e: ((e.kind is GtsKind.CFP) if prefer_cap else 0, -e.seq))


class GtsNode:
    """SAB, ACT and handshake bookkeeping of one node."""

    def __init__(self, node_id: int, config: ProtocolConfig, c_cap: int = 0):
        self.id = node_id
        self.config = config
        self.c_cap = c_cap
        self.sab = SlotAllocationBitmap(config.n_sf)
        self.act: dict[tuple[int, int], ActEntry] = {}
        self.handshakes: dict[int, Handshake] = {}
        self.by_slot: dict[int, ActEntry] = {}
        # called as listener(node_id, entry, added) when an entry enters or leaves VALID
        self.listener = None
        self._seq = itertools.count()
        self._hs_counter = itertools.count(1)

    def _next_hs(self) -> tuple[int, int]:
        return (self.id, next(self._hs_counter))

    def _changed(self, entry: ActEntry, added: bool) -> None:
        if self.listener is not None:
            self.listener(self.id, entry, added)

    # -- ACT helpers --

    def entries(self, state: EntryState | None = EntryState.VALID, kind: GtsKind | None = None,
                direction: Direction | None = None) -> list[ActEntry]:
        return [
            e for e in self.act.values()
            if (state is None or e.state is state)
            and (kind is None or e.kind is kind)
            and (direction is None or e.direction is direction)
        ]

    def link_entries(self, counterpart: int, direction: Direction, state=EntryState.VALID) -> list[ActEntry]:
        return [e for e in self.act.values()
                if e.counterpart == counterpart and e.direction is direction and e.state is state]

    def _add(self, entry: ActEntry) -> None:
        if entry.key in self.act or entry.slot in self.sab.own_slots:
            raise GtsError(f"node {self.id}: slot {entry.slot} already in use")
        entry.seq = next(self._seq)
        self.act[entry.key] = entry
        self.by_slot[entry.slot] = entry
        self.sab.own_slots.add(entry.slot)
        self.sab.mark(entry.slot, entry.channel)
        if entry.state is EntryState.VALID:
            self._changed(entry, True)

    def remove(self, entry: ActEntry) -> None:
        if self.act.get(entry.key) is not entry:
            return
        del self.act[entry.key]
        del self.by_slot[entry.slot]
        self.sab.own_slots.discard(entry.slot)
        self.sab.clear(entry.slot, entry.channel)
        if entry.state is EntryState.VALID:
            self._changed(entry, False)

    def state_snapshot(self) -> tuple:
        act = tuple(sorted((k, e.direction.value, e.counterpart, e.kind.value, e.state.value)
                           for k, e in self.act.items()))
        return self.sab.snapshot(), act

    # -- initiator side --

    def open_handshake_with(self, counterpart: int) -> Handshake | None:
        for hs in self.handshakes.values():
            if hs.open and counterpart in (hs.initiator, hs.responder):
                return hs
        return None

    def begin_allocation(self, counterpart: int, kind: GtsKind, num_slots: int,
                         rng: np.random.Generator | None = None, max_candidates: int | None = None) -> GtsCommand:
        if self.open_handshake_with(counterpart) is not None:
            raise GtsError(f"node {self.id}: handshake with {counterpart} already in flight")
        cands = candidate_slots(self.config, kind, self.sab, rng, self.c_cap, max_candidates, counterpart)
        if not cands:
            raise Exhausted(f"node {self.id}: no free {kind.value}")
        hs = Handshake(self._next_hs(), "alloc", self.id, counterpart, kind, num_slots)
        hs.advance(Phase.REQUEST_SENT)
        self.handshakes[hs.hs_id] = hs
        return GtsCommand("request", "alloc", hs.hs_id, self.id, counterpart, kind, num_slots, candidates=cands)

    def begin_deallocation(self, counterpart: int, entries: list[ActEntry]) -> GtsCommand:
        if not entries:
            raise NothingToDeallocate(f"node {self.id}: nothing to release")
        if self.open_handshake_with(counterpart) is not None:
            raise GtsError(f"node {self.id}: handshake with {counterpart} already in flight")
        kind = entries[0].kind
        hs = Handshake(self._next_hs(), "dealloc", self.id, counterpart, kind, len(entries),
                       tuples=[e.key for e in entries])
        hs.advance(Phase.REQUEST_SENT)
        self.handshakes[hs.hs_id] = hs
        return GtsCommand("request", "dealloc", hs.hs_id, self.id, counterpart, kind, len(entries),
                          tuples=list(hs.tuples))

    def on_response(self, msg: GtsCommand, activate_at: int = 0) -> tuple[GtsCommand | None, list[ActEntry]]:
        """Initiator receives the response; returns (notify, committed entries)."""
        hs = self.handshakes.get(msg.hs_id)
        if hs is None or hs.phase is not Phase.REQUEST_SENT:
            return None, []
        hs.advance(Phase.RESPONSE_SEEN)
        self.sab.set_node_slots(msg.responder, msg.busy_slots)
        if msg.op == "dealloc":
            for key in hs.tuples:
                e = self.act.get(key)
                if e is not None and e.counterpart == msg.responder:
                    self.remove(e)
            hs.advance(Phase.COMMITTED)
            return GtsCommand("notify", "dealloc", hs.hs_id, self.id, msg.responder, hs.kind,
                              tuples=list(hs.tuples)), []
        if not msg.ok:
            hs.advance(Phase.ROLLED_BACK)
            return None, []
        committed = []
        for slot, ch in msg.tuples:
            if slot in self.sab.own_slots or not self.sab.is_free(slot, ch):
                continue
            e = ActEntry(slot, ch, Direction.TX, msg.responder, hs.kind, EntryState.VALID,
                         hs_id=hs.hs_id, active_from=activate_at)
            self._add(e)
            committed.append(e)
        hs.tuples = [e.key for e in committed]
        if not committed:
            hs.advance(Phase.ROLLED_BACK)
            return GtsCommand("notify", "alloc", hs.hs_id, self.id, msg.responder, hs.kind, tuples=[]), []
        hs.advance(Phase.COMMITTED)
        return GtsCommand("notify", "alloc", hs.hs_id, self.id, msg.responder, hs.kind,
                          tuples=list(hs.tuples)), committed

    # -- responder side --

    def on_request(self, msg: GtsCommand) -> GtsCommand:
        if msg.op == "dealloc":
            for key in msg.tuples:
                e = self.act.get(key)
                if e is not None and e.counterpart == msg.initiator:
                    self.remove(e)
            return GtsCommand("response", "dealloc", msg.hs_id, msg.initiator, self.id, msg.kind,
                              tuples=list(msg.tuples), busy_slots=tuple(sorted(self.sab.own_slots)))
        hs = Handshake(msg.hs_id, "alloc", msg.initiator, self.id, msg.kind, msg.num_slots)
        hs.advance(Phase.REQUEST_SENT)
        chosen: list[tuple[int, int]] = []
        forbid = (1 << self.c_cap) if msg.kind is GtsKind.CAP and self.config.mode is Mode.DCR else 0
        for slot, mask in msg.candidates:
            if len(chosen) >= msg.num_slots:
                break
            if slot in self.sab.own_slots:
                continue
            avail = mask & self.sab.free_mask(slot) & ~forbid
            if avail:
                chosen.append((slot, lowest_channel(avail)))
        if not chosen:
            hs.advance(Phase.ROLLED_BACK)
            self.handshakes[hs.hs_id] = hs
            return GtsCommand("response", "alloc", msg.hs_id, msg.initiator, self.id, msg.kind, ok=False,
                              busy_slots=tuple(sorted(self.sab.own_slots)))
        for slot, ch in chosen:
            self._add(ActEntry(slot, ch, Direction.RX, msg.initiator, msg.kind, EntryState.PENDING,
                               hs_id=msg.hs_id))
        hs.tuples = chosen
        hs.advance(Phase.RESPONSE_SEEN)
        self.handshakes[hs.hs_id] = hs
        return GtsCommand("response", "alloc", msg.hs_id, msg.initiator, self.id, msg.kind,
                          num_slots=len(chosen), tuples=chosen, busy_slots=tuple(sorted(self.sab.own_slots)))

    def on_notify(self, msg: GtsCommand, activate_at: int = 0) -> list[ActEntry]:
        hs = self.handshakes.get(msg.hs_id)
        if msg.op == "dealloc" or hs is None or hs.phase is not Phase.RESPONSE_SEEN:
            return []
        keep = set(msg.tuples)
        committed = []
        for key in hs.tuples:
            e = self.act.get(key)
            if e is None or e.hs_id != hs.hs_id:
                continue
            if key in keep:
                e.state = EntryState.VALID
                e.active_from = activate_at
                self._changed(e, True)
                committed.append(e)
            else:
                self.remove(e)
        hs.advance(Phase.COMMITTED if committed else Phase.ROLLED_BACK)
        return committed

    # -- failure paths --

    def rollback(self, hs_id: int) -> list[ActEntry]:
        """Undo an open handshake (timeout, dropped frame, conflict)."""
        hs = self.handshakes.get(hs_id)
        if hs is None or not hs.open:
            return []
        undone = []
        if hs.op == "alloc":
            for key in hs.tuples:
                e = self.act.get(key)
                if e is not None and e.hs_id == hs_id and e.state is EntryState.PENDING:
                    self.remove(e)
                    undone.append(e)
        else:
            # the counterpart may already have released; drop our side as well
            for key in hs.tuples:
                e = self.act.get(key)
                if e is not None and e.counterpart in (hs.initiator, hs.responder):
                    self.remove(e)
                    undone.append(e)
        hs.advance(Phase.ROLLED_BACK)
        return undone

    def detect_inconsistency_and_rollback(self, msg: GtsCommand) -> tuple[list[ActEntry], list[GtsCommand]]:
        """Process an overheard response/notify of another pair.

        Returns the local entries that were rolled back or invalidated and the
        deallocation requests to send for invalidated committed entries.
        """
        if self.id in (msg.initiator, msg.responder):
            return [], []
        if msg.op == "dealloc":
            if msg.cls in ("response", "notify"):
                for slot, ch in msg.tuples:
                    if (slot, ch) not in self.act:
                        self.sab.clear(slot, ch)
                    self.sab.clear_busy(slot, msg.initiator)
                    self.sab.clear_busy(slot, msg.responder)
            return [], []
        if not msg.ok:
            return [], []
        undone: list[ActEntry] = []
        deallocs: list[GtsCommand] = []
        for slot, ch in msg.tuples:
            e = self.act.get((slot, ch))
            if e is not None:
                if e.state is EntryState.PENDING:
                    hs = self.handshakes.get(e.hs_id)
                    self.remove(e)
                    if hs is not None and hs.open:
                        hs.tuples = [t for t in hs.tuples if t != e.key]
                        if not hs.tuples:
                            hs.advance(Phase.ROLLED_BACK)
                    undone.append(e)
                elif e.state is EntryState.VALID:
                    self.remove(e)
                    e.state = EntryState.INVALID
                    undone.append(e)
                    if self.open_handshake_with(e.counterpart) is None:
                        hs = Handshake(self._next_hs(), "dealloc", self.id, e.counterpart, e.kind, 1,
                                       tuples=[e.key])
                        hs.advance(Phase.REQUEST_SENT)
                        self.handshakes[hs.hs_id] = hs
                        deallocs.append(GtsCommand("request", "dealloc", hs.hs_id, self.id, e.counterpart,
                                                   e.kind, 1, tuples=[e.key]))
            self.sab.mark(slot, ch)
            self.sab.mark_busy(slot, msg.initiator)
            self.sab.mark_busy(slot, msg.responder)
        return undone, deallocs


def find_conflicts(nodes: Iterable[GtsNode]) -> list[tuple[tuple[int, int], list[frozenset[int]]]]:
    """(slot, channel) tuples held VALID by more than one link network-wide."""
    holders: dict[tuple[int, int], set[frozenset[int]]] = {}
    radio: dict[tuple[int, int], int] = {}
    conflicts = []
    for node in nodes:
        for e in node.act.values():
            if e.state is not EntryState.VALID:
                continue
            holders.setdefault(e.key, set()).add(frozenset((node.id, e.counterpart)))
            radio[(node.id, e.slot)] = radio.get((node.id, e.slot), 0) + 1
    for key, links in holders.items():
        if len(links) > 1:
            conflicts.append((key, sorted(links, key=sorted)))
    return conflicts


def first_superframe_conversions(nodes: Iterable[GtsNode]) -> list[tuple[int, int]]:
    """CAP-GTS entries located in the first superframe of the MSF (must be empty)."""
    bad = []
    for node in nodes:
        for e in node.act.values():
            if e.kind is GtsKind.CAP:
                sf, j = split_msf_slot(e.slot)
                if sf == 0 or not (CAP_FIRST <= j <= CAP_LAST):
                    bad.append((node.id, e.slot))
    return bad
