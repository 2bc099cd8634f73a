"""Discrete-event DSME simulator at symbol resolution.

One run is a pure function of ``(Scenario, seed)``.  The model covers what
the CAP reduction modes change: slotted CSMA/CA for GTS negotiation frames on
the CAP channel, the three-way handshake with overhearing, conflict-free GTS
transfers, split CAP/GTS queues and the mode dynamics (ACR alternation, DCR
conversions).  All CAP traffic shares one collision domain; GTS links are
ideal.
"""

from __future__ import annotations

import bisect
import hashlib
import heapq
import itertools
from collections import deque
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .frame_structure import ConfigError, Mode, ProtocolConfig, SlotKind, TimingTable, derive_layout
from .gts import (
    Direction,
    EntryState,
    Exhausted,
    GtsCommand,
    GtsKind,
    GtsNode,
    NothingToDeallocate,
    candidate_slots,
    cap_gts_positions,
    deallocation_order,
    split_msf_slot,
)
from .scheduler import LinkEstimate, SchedulerConfig, plan_negotiations, target_slots, update_estimate
from .traffic import Topology, TrafficConfig, build_binary_tree, generate, node_rng

SYMBOLS_PER_SECOND = 62_500

# event ranks: ties at one instant resolve in this order
_SLOT, _TXEND, _GEN, _TIMEOUT, _TICK, _PLAN, _CSMA = range(7)


@dataclass(frozen=True)
class CsmaConfig:
    min_be: int | None = None  # None: use ProtocolConfig.be
    max_be: int = 5
    max_backoffs: int = 4
    max_retries: int = 3
    cca_symbols: int = 8
    turnaround_symbols: int = 12
    ack_symbols: int = 22
    data_bytes: int = 127
    # MHR 9 + command fields 6 + SAB specification 3 + one-superframe SAB
    # sub-block (16 channels x 15 slots = 30) + FCS 2
    cmd_bytes: int = 50
    phy_overhead_bytes: int = 6

    def frame_symbols(self, payload_bytes: int) -> int:
        return 2 * (payload_bytes + self.phy_overhead_bytes)


@dataclass(frozen=True)
class Scenario:
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    topology: Topology = field(default_factory=lambda: build_binary_tree(31))
    duration_s: float = 60.0
    q_cap: int = 8
    q_gts: int = 22
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    csma: CsmaConfig = field(default_factory=CsmaConfig)
    c_cap: int = 0
    beacon_loss: float = 0.0
    handshake_timeout_msfs: int = 1
    # "random": each node plans at its own fixed offset into the MSF;
    # "boundary": all nodes plan at the MSF start
    tick_phase: str = "random"
    # plan again as soon as a handshake ends instead of waiting for the next tick
    replan_on_completion: bool = False

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigError("duration must be positive")
        if self.q_cap < 1 or self.q_gts < 1:
            raise ConfigError("queue capacities must be >= 1")
        if not 0 <= self.beacon_loss <= 1:
            raise ConfigError("beacon_loss must be a probability")
        if self.handshake_timeout_msfs < 1:
            raise ConfigError("handshake timeout must be >= 1 MSF")
        if self.tick_phase not in ("boundary", "random"):
            raise ConfigError("tick_phase must be 'boundary' or 'random'")

    def metadata(self) -> dict:
        out = {
            "mode": self.protocol.mode.value,
            "so": self.protocol.so,
            "mo": self.protocol.mo,
            "bo": self.protocol.bo,
            "be": self.protocol.be,
            "pattern": self.traffic.pattern.value,
            "delta": self.traffic.delta,
            "nodes": len(self.topology.nodes),
            "duration_s": self.duration_s,
            "q_cap": self.q_cap,
            "q_gts": self.q_gts,
        }
        out.update({f"sched_{k}": v for k, v in asdict(self.scheduler).items()})
        return out


@dataclass
class Trace:
    """Line-oriented run record: ``(time_symbols, event, node, detail...)``."""

    metadata: dict
    records: list[tuple] = field(default_factory=list)

    def add(self, *rec) -> None:
        self.records.append(rec)

    def to_csv(self) -> str:
        return "".join(",".join(map(str, r)) + "\n" for r in self.records)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update((",".join(map(str, r)) + "\n").encode())
        return h.hexdigest()

    @property
    def complete(self) -> bool:
        return bool(self.records) and self.records[-1][1] == "end"


@dataclass
class Frame:
    msg: GtsCommand
    dest: int | None  # None: broadcast
    created: int

    @property
    def label(self) -> str:
        return f"{self.msg.cls}"


@dataclass
class Tx:
    sender: int
    frame: Frame
    start: int
    end: int
    collided: bool = False


class Node:
    def __init__(self, node_id: int, parent: int | None, hop: int, config: ProtocolConfig, c_cap: int):
        self.id = node_id
        self.parent = parent
        self.hop = hop
        self.gts = GtsNode(node_id, config, c_cap)
        self.cap_queue: deque[Frame] = deque()
        self.gts_queue: deque[tuple[int, int, int]] = deque()
        # time integral of the GTS queue length since q_since
        self.q_area = 0
        self.q_last = 0
        self.q_since = 0
        self.est = LinkEstimate(node_id, parent if parent is not None else -1, hop=hop)
        self.arrivals = 0
        # intents of the current planning tick still to negotiate
        self.backlog: list = []
        # CSMA state
        self.cur: Frame | None = None
        self.nb = 0
        self.be = 0
        self.retries = 0
        self.token = 0
        # DCR: MSF slots currently converted for this node
        self.conv_active: set[int] = set()
        self.runs: list[tuple[int, int]] | None = None
        self.run_starts: list[int] = []
        self.valid = 0
        self.max_valid = 0
        # CAP-GTS entries among ``valid`` and the peak GTS count per BI; under
        # ACR a CAP-GTS only carries traffic in every other BI
        self.valid_cap = 0
        self.max_per_bi = Fraction(0)


class Simulator:
    def __init__(self, scenario: Scenario, seed: int):
        self.sc = scenario
        self.seed = seed
        self.cfg = scenario.protocol
        self.mode = self.cfg.mode
        self.timing = TimingTable.from_config(self.cfg)
        self.layout = derive_layout(self.cfg)
        self.slot_sym = self.timing.symbols_per_slot
        self.msf_sym = self.timing.symbols_per_msf
        self.n_ts = self.cfg.n_ts
        self.period_slots = len(self.layout.slots)
        self.period_sym = self.period_slots * self.slot_sym
        self.slots_per_bi = self.layout.slots_per_bi
        self.ub = self.cfg.unit_backoff
        self.min_be = scenario.csma.min_be if scenario.csma.min_be is not None else self.cfg.be
        self.end_time = int(round(scenario.duration_s * SYMBOLS_PER_SECOND))
        self.timeout = scenario.handshake_timeout_msfs * self.msf_sym
        self.data_sym = scenario.csma.frame_symbols(scenario.csma.data_bytes)
        self.cmd_sym = scenario.csma.frame_symbols(scenario.csma.cmd_bytes)
        self.ack_extra = scenario.csma.turnaround_symbols + scenario.csma.ack_symbols
        if self.data_sym > self.slot_sym:
            raise ConfigError("a data frame does not fit into one slot at this SO")

        topo: Topology = scenario.topology
        self.sink = topo.sink
        self.nodes: dict[int, Node] = {}
        for n in topo.nodes:
            node = Node(n, topo.parent[n], topo.hop[n], self.cfg, scenario.c_cap)
            node.gts.listener = self._on_valid_change
            self.nodes[n] = node
        self.order = sorted(self.nodes)
        self.rng = {n: node_rng(seed, n, 2) for n in self.order}
        self.sched_rng = {n: node_rng(seed, n, 3) for n in self.order}
        self.beacon_rng = node_rng(seed, -1 % (2**31), 4)

        self.trace = Trace({**scenario.metadata(), "seed": seed})
        self.events: list = []
        self._seq = itertools.count()
        self.active_tx: list[Tx] = []
        self.valid_index: dict[tuple[int, int], dict[tuple[int, int], int]] = {}
        self.violations = 0
        self.generated = self.delivered = self.dropped = 0
        self._pid = itertools.count()

        base = [k.is_cap for k in self.layout.slots]
        self.base_cap = base
        self.base_runs = self._runs_from_mask(base)

    # -- event plumbing --

    def push(self, time: int, rank: int, node: int, kind: str, payload=None) -> None:
        heapq.heappush(self.events, (time, rank, node, next(self._seq), kind, payload))

    def run(self) -> Trace:
        sc = self.sc
        for n in self.order:
            if n == self.sink:
                continue
            times = generate(sc.traffic, n, sc.duration_s, self.seed, sink=self.sink)
            counts: dict[int, int] = {}
            for t in times:
                ts = int(round(t * SYMBOLS_PER_SECOND))
                counts[ts] = counts.get(ts, 0) + 1
            for ts, c in sorted(counts.items()):
                if ts < self.end_time:
                    self.push(ts, _GEN, n, "gen", c)
            phase = int(self.sched_rng[n].integers(0, self.msf_sym)) if sc.tick_phase == "random" else 0
            self.push(phase + self.msf_sym, _TICK, n, "tick")
        self.push(0, _SLOT, -1, "slot", 0)

        handlers = {
            "slot": self._on_slot,
            "gen": self._on_gen,
            "tick": self._on_tick,
            "plan": self._on_plan,
            "csma": self._on_csma,
            "txend": self._on_txend,
            "timeout": self._on_timeout,
        }
        while self.events:
            t, _, node, _, kind, payload = heapq.heappop(self.events)
            if t >= self.end_time:
                break
            handlers[kind](t, node, payload)
        self._finish()
        return self.trace

    def _finish(self) -> None:
        t = self.end_time
        residual = sum(len(n.gts_queue) for n in self.nodes.values())
        for n in self.order:
            self._sample_queue(t, self.nodes[n])
        for n in self.order:
            node = self.nodes[n]
            self.trace.add(t, "maxgts", n, node.hop, node.max_valid, float(node.max_per_bi))
        self.trace.add(t, "end", -1, self.generated, self.delivered, self.dropped, residual, self.violations)

    # -- CAP geometry --

    def _runs_from_mask(self, mask: list[bool]) -> list[tuple[int, int]]:
        runs = []
        start = None
        for i, c in enumerate(mask):
            if c and start is None:
                start = i
            elif not c and start is not None:
                runs.append((start * self.slot_sym, i * self.slot_sym))
                start = None
        if start is not None:
            runs.append((start * self.slot_sym, len(mask) * self.slot_sym))
        return runs

    def _node_runs(self, node: Node) -> list[tuple[int, int]]:
        if node.runs is None:
            if node.conv_active:
                mask = list(self.base_cap)
                for i in range(len(mask)):
                    if mask[i] and (i % self.n_ts) in node.conv_active:
                        mask[i] = False
                node.runs = self._runs_from_mask(mask)
            else:
                node.runs = self.base_runs
            node.run_starts = [r[0] for r in node.runs]
        return node.runs

    def _cap_run_at(self, node: Node, t: int) -> tuple[int, int] | None:
        runs = self._node_runs(node)
        base = (t // self.period_sym) * self.period_sym
        off = t - base
        i = bisect.bisect_right(node.run_starts, off) - 1
        if i >= 0 and off < runs[i][1]:
            return base + runs[i][0], base + runs[i][1]
        return None

    def _cap_advance(self, node: Node, t: int, periods: int) -> int:
        """Time reached after ``periods`` backoff periods of ``node``'s CAP time."""
        runs = self._node_runs(node)
        starts = node.run_starts
        t = -(-t // self.ub) * self.ub
        base = (t // self.period_sym) * self.period_sym
        off = t - base
        need = periods * self.ub
        i = bisect.bisect_right(starts, off) - 1
        if i >= 0 and off < runs[i][1]:
            pos = off
        else:
            i += 1
            if i == len(runs):
                i = 0
                base += self.period_sym
            pos = runs[i][0]
        while True:
            end = runs[i][1]
            if need < end - pos:
                return base + pos + need
            need -= end - pos
            i += 1
            if i == len(runs):
                i = 0
                base += self.period_sym
            pos = runs[i][0]

    def _listening(self, node: Node, start: int, end: int) -> bool:
        run = self._cap_run_at(node, start)
        return run is not None and end <= run[1]

    # -- GTS bookkeeping hooks --

    def _on_valid_change(self, node_id: int, entry, added: bool) -> None:
        link = (min(node_id, entry.counterpart), max(node_id, entry.counterpart))
        holders = self.valid_index.setdefault(entry.key, {})
        node = self.nodes[node_id]
        if added:
            holders[link] = holders.get(link, 0) + 1
            node.valid += 1
            node.valid_cap += entry.kind is GtsKind.CAP
            node.max_valid = max(node.max_valid, node.valid)
            per_bi = node.valid - (Fraction(node.valid_cap, 2) if self.mode is Mode.ACR else 0)
            node.max_per_bi = max(node.max_per_bi, per_bi)
        else:
            left = holders.get(link, 0) - 1
            if left > 0:
                holders[link] = left
            else:
                holders.pop(link, None)
            node.valid -= 1
            node.valid_cap -= entry.kind is GtsKind.CAP
            if entry.kind is GtsKind.CAP and entry.slot in node.conv_active:
                node.conv_active.discard(entry.slot)
                node.runs = None

    def _check_commit(self, t: int, node: Node, entries) -> None:
        for e in entries:
            holders = self.valid_index.get(e.key, {})
            if len(holders) > 1:
                self.violations += 1
                self.trace.add(t, "viol", node.id, "conflict", e.slot, e.channel)
            if e.kind is GtsKind.CAP and self.mode is Mode.DCR:
                sf, _ = split_msf_slot(e.slot)
                if sf == 0:
                    self.violations += 1
                    self.trace.add(t, "viol", node.id, "first_sf", e.slot, e.channel)
                if e.channel == self.sc.c_cap:
                    self.violations += 1
                    self.trace.add(t, "viol", node.id, "cap_channel", e.slot, e.channel)

    def _activate_at(self, t: int, kind: GtsKind) -> int:
        if self.mode is Mode.DCR and kind is GtsKind.CAP:
            return (t // self.msf_sym + 1) * self.msf_sym
        return 0

    # -- slot boundaries --

    def _on_slot(self, t: int, _node: int, abs_slot: int) -> None:
        nxt = t + self.slot_sym
        if nxt < self.end_time:
            self.push(nxt, _SLOT, -1, "slot", abs_slot + 1)
        mslot = abs_slot % self.n_ts
        if mslot == 0:
            self._msf_boundary(t, abs_slot)
        kind = self.layout.slots[abs_slot % self.period_slots]
        if kind is SlotKind.CFP or kind is SlotKind.CAP_GTS_ELIGIBLE:
            self._transfers(t, mslot)

    def _msf_boundary(self, t: int, abs_slot: int) -> None:
        if abs_slot % self.slots_per_bi == 0 and self.mode is Mode.ACR:
            # the beacon carries the reduction bit; a node missing it flips on its own
            # schedule, so both paths lead to the same layout
            for n in self.order:
                if self.sc.beacon_loss and self.beacon_rng.random() < self.sc.beacon_loss:
                    self.trace.add(t, "bcnlost", n)
        expire = self.sc.scheduler.expiration_msfs
        for n in self.order:
            node = self.nodes[n]
            for e in list(node.gts.act.values()):
                if e.state is not EntryState.VALID:
                    continue
                e.idle = 0 if e.used else e.idle + 1
                e.used = False
                if e.direction is Direction.RX and e.idle > 2 * expire:
                    node.gts.remove(e)
                    self.trace.add(t, "rxexpire", n, e.slot, e.channel)
            if self.mode is Mode.DCR:
                conv = {e.slot for e in node.gts.act.values()
                        if e.kind is GtsKind.CAP and e.state is EntryState.VALID and e.active_from <= t}
                if conv != node.conv_active:
                    for s in sorted(conv - node.conv_active):
                        self.trace.add(t, "conv", n, s)
                    node.conv_active = conv
                    node.runs = None
            self._sample_queue(t, node)
            self.trace.add(t, "alloc", n, node.hop, node.valid)

    def _queue_step(self, t: int, node: Node) -> None:
        # call before the queue length changes
        node.q_area += len(node.gts_queue) * (t - node.q_last)
        node.q_last = t

    def _sample_queue(self, t: int, node: Node) -> None:
        """Emit the time-weighted mean queue length since the previous sample."""
        self._queue_step(t, node)
        span = t - node.q_since
        if span > 0:
            self.trace.add(t, "q", node.id, node.hop, len(node.gts_queue), node.q_area / span, span)
        node.q_area = 0
        node.q_since = t

    def _transfers(self, t: int, mslot: int) -> None:
        used: set[tuple[int, int]] = set()
        for n in self.order:
            node = self.nodes[n]
            e = node.gts.by_slot.get(mslot)
            if e is None or e.direction is not Direction.TX or e.state is not EntryState.VALID or t < e.active_from:
                continue
            rx = self.nodes[e.counterpart]
            re = rx.gts.act.get(e.key)
            if re is None or re.counterpart != n or re.direction is not Direction.RX:
                node.gts.remove(e)
                self.trace.add(t, "ghost", n, e.slot, e.channel)
                continue
            if re.state is not EntryState.VALID or t < re.active_from:
                continue
            if e.key in used:
                self.violations += 1
                self.trace.add(t, "viol", n, "transfer", e.slot, e.channel)
            used.add(e.key)
            if not node.gts_queue:
                continue
            self._queue_step(t, node)
            pid, src, created = node.gts_queue.popleft()
            e.used = re.used = True
            self.trace.add(t, "gtx", n, rx.id, pid)
            self._receive_data(t, rx, pid, src, created)

    def _receive_data(self, t: int, rx: Node, pid: int, src: int, created: int) -> None:
        if rx.id == self.sink:
            self.delivered += 1
            self.trace.add(t, "deliver", rx.id, pid, src, created)
            return
        rx.arrivals += 1
        if len(rx.gts_queue) >= self.sc.q_gts:
            self.dropped += 1
            self.trace.add(t, "drop", rx.id, "gts", pid)
            return
        self._queue_step(t, rx)
        rx.gts_queue.append((pid, src, created))

    def _on_gen(self, t: int, n: int, count: int) -> None:
        node = self.nodes[n]
        self.trace.add(t, "gen", n, count)
        for _ in range(count):
            pid = next(self._pid)
            self.generated += 1
            node.arrivals += 1
            if len(node.gts_queue) >= self.sc.q_gts:
                self.dropped += 1
                self.trace.add(t, "drop", n, "gts", pid)
            else:
                self._queue_step(t, node)
                node.gts_queue.append((pid, n, t))

    # -- scheduling --

    def _on_tick(self, t: int, n: int, _payload) -> None:
        node = self.nodes[n]
        node.est = update_estimate(node.est, node.arrivals, self.sc.scheduler)
        node.arrivals = 0
        self.push(t + self.msf_sym, _TICK, n, "tick")
        self._plan(t, node)

    def _replan(self, t: int, n: int) -> None:
        if self.sc.replan_on_completion or self.nodes[n].backlog:
            self.push(t, _PLAN, n, "plan")

    def _on_plan(self, t: int, n: int, _payload) -> None:
        node = self.nodes[n]
        if self.sc.replan_on_completion:
            self._plan(t, node)
        elif node.backlog and node.gts.open_handshake_with(node.parent) is None:
            self._negotiate(t, node, node.backlog.pop(0))

    def _link_entries(self, node: Node) -> list:
        return [e for e in node.gts.act.values()
                if e.counterpart == node.parent and e.direction is Direction.TX and e.state is EntryState.VALID]

    def _plan(self, t: int, node: Node) -> None:
        node.backlog = []
        if node.parent is None or node.gts.open_handshake_with(node.parent) is not None:
            return
        cfg = self.sc.scheduler
        entries = self._link_entries(node)
        cfp = [e for e in entries if e.kind is GtsKind.CFP]
        cap = [e for e in entries if e.kind is GtsKind.CAP]
        est = LinkEstimate(
            node.id, node.parent, ewma=node.est.ewma, alpha=cfg.alpha,
            allocated_cfp=len(cfp), allocated_cap=len(cap),
            idle_msfs=max((e.idle for e in entries), default=0),
            expired_cfp=sum(1 for e in cfp if e.idle > cfg.expiration_msfs),
            expired_cap=sum(1 for e in cap if e.idle > cfg.expiration_msfs),
            hop=node.hop, samples=node.est.samples,
        )
        change = target_slots(est, cfg)
        if change == 0:
            return
        if change > 0:
            sab = node.gts.sab
            free_cfp = len(candidate_slots(self.cfg, GtsKind.CFP, sab, counterpart=node.parent))
            free_cap = 0
            if self.mode in (Mode.ACR, Mode.DCR):
                not_cap = ~(1 << self.sc.c_cap) if self.mode is Mode.DCR else -1
                free_cap = sum(
                    1 for s in cap_gts_positions(self.cfg)
                    if s not in sab.own_slots and not sab.is_busy(s, node.parent) and sab.free_mask(s) & not_cap
                )
            est = LinkEstimate(**{**est.__dict__, "free_cfp": free_cfp, "free_cap": free_cap})
        intents = plan_negotiations(self.mode, [est], cfg)
        if not intents:
            return
        node.backlog = intents[1:]
        self._negotiate(t, node, intents[0])

    def _negotiate(self, t: int, node: Node, it) -> None:
        cfg = self.sc.scheduler
        self.trace.add(t, "intent", node.id, it.action, it.kind.value, it.count)
        if it.action == "allocate":
            limit = None if it.kind is GtsKind.CFP else it.count + 8
            try:
                msg = node.gts.begin_allocation(node.parent, it.kind, it.count, self.sched_rng[node.id], limit)
            except Exhausted:
                self._replan(t, node.id)
                return
        else:
            pool = [e for e in self._link_entries(node)
                    if e.kind is it.kind and e.idle > cfg.expiration_msfs]
            chosen = deallocation_order(pool, self.mode)[: it.count]
            try:
                msg = node.gts.begin_deallocation(node.parent, chosen)
            except NothingToDeallocate:
                self._replan(t, node.id)
                return
        self._hs_trace(t, node.id, msg, "request")
        self._send(t, node, msg, node.parent)

    def _hs_trace(self, t: int, n: int, msg: GtsCommand, outcome: str) -> None:
        first = msg.tuples[0] if msg.tuples else (-1, -1)
        self.trace.add(t, "hs", n, msg.op, msg.cls, msg.kind.value, first[0], first[1], len(msg.tuples) or msg.num_slots, outcome)

    # -- CAP transmissions --

    def _send(self, t: int, node: Node, msg: GtsCommand, dest: int | None) -> None:
        frame = Frame(msg, dest, t)
        if len(node.cap_queue) + (node.cur is not None) >= self.sc.q_cap:
            self.trace.add(t, "drop", node.id, "cap", msg.cls)
            self._frame_failed(t, node, frame)
            return
        node.cap_queue.append(frame)
        if node.cur is None:
            self._kick(t, node)

    def _kick(self, t: int, node: Node) -> None:
        while node.cur is None and node.cap_queue:
            frame = node.cap_queue.popleft()
            msg = frame.msg
            if msg.cls == "response" and msg.op == "alloc" and msg.ok:
                hs = node.gts.handshakes.get(msg.hs_id)
                if hs is None or not hs.open:
                    self.trace.add(t, "stale", node.id, msg.cls, msg.hs_id[1])
                    continue
            node.cur = frame
            node.nb = 0
            node.be = self.min_be
            node.retries = 0
            self._backoff(t, node)

    def _backoff(self, t: int, node: Node) -> None:
        periods = int(self.rng[node.id].integers(0, 2**node.be))
        node.token += 1
        self.push(self._cap_advance(node, t, periods), _CSMA, node.id, "csma", node.token)

    def _on_csma(self, t: int, n: int, token: int) -> None:
        node = self.nodes[n]
        if token != node.token or node.cur is None:
            return
        run = self._cap_run_at(node, t)
        if run is None:
            # the slot turned into a GTS for this node since the backoff was drawn
            node.token += 1
            self.push(self._cap_advance(node, t, 0), _CSMA, n, "csma", node.token)
            return
        self.active_tx = [x for x in self.active_tx if x.end > t]
        if any(x.start <= t < x.end for x in self.active_tx):
            node.nb += 1
            node.be = min(node.be + 1, self.sc.csma.max_be)
            if node.nb > self.sc.csma.max_backoffs:
                # a failed CSMA attempt costs one retry; the last one is final
                node.retries += 1
                if node.retries > self.sc.csma.max_retries:
                    self.trace.add(t, "caf", n, node.cur.msg.cls)
                    self._frame_failed(t, node, node.cur)
                    return
                node.nb = 0
                node.be = self.min_be
            self._backoff(t + self.ub, node)
            return
        frame = node.cur
        start = t + self.ub
        end = start + self.cmd_sym + (self.ack_extra if frame.dest is not None else 0)
        if end > run[1]:
            self._backoff(run[1], node)
            return
        tx = Tx(n, frame, start, end)
        for other in self.active_tx:
            if other.end > start and other.start < end:
                other.collided = tx.collided = True
        self.active_tx.append(tx)
        node.token += 1
        self.push(end, _TXEND, n, "txend", tx)

    def _on_txend(self, t: int, n: int, tx: Tx) -> None:
        node = self.nodes[n]
        frame = tx.frame
        msg = frame.msg
        if frame.dest is None:
            ok = not tx.collided
            # single collision domain: an intact broadcast reaches every other node
            receivers = [self.nodes[m] for m in self.order if m != n] if ok else []
        else:
            dest = self.nodes[frame.dest]
            ok = not tx.collided and self._listening(dest, tx.start, tx.end)
            receivers = [dest] if ok else []
        if ok:
            self.trace.add(t, "cmd", n, msg.cls, msg.op, tx.start - frame.created, node.retries)
            node.cur = None
            self._deliver(t, node, msg, receivers)
            self._kick(t, node)
            return
        if frame.dest is None:
            self.trace.add(t, "lost", n, msg.cls, msg.op)
            node.cur = None
            self._kick(t, node)
            return
        node.retries += 1
        if node.retries > self.sc.csma.max_retries:
            self.trace.add(t, "noack", n, msg.cls)
            self._frame_failed(t, node, frame)
            return
        node.nb = 0
        node.be = self.min_be
        self._backoff(t, node)

    def _frame_failed(self, t: int, node: Node, frame: Frame) -> None:
        if node.cur is frame:
            node.cur = None
        msg = frame.msg
        hs = node.gts.handshakes.get(msg.hs_id)
        if hs is not None and hs.open:
            node.gts.rollback(msg.hs_id)
            self.trace.add(t, "hs", node.id, msg.op, msg.cls, msg.kind.value, -1, -1, 0, "rollback")
        if msg.cls == "request":
            self._replan(t, node.id)
        self._kick(t, node)

    # -- command delivery --

    def _deliver(self, t: int, sender: Node, msg: GtsCommand, receivers: list[Node]) -> None:
        if msg.cls == "request":
            resp_node = receivers[0]
            if msg.op == "alloc":
                hs = sender.gts.handshakes.get(msg.hs_id)
                if hs is not None and hs.open:
                    self.push(t + self.timeout, _TIMEOUT, sender.id, "timeout", msg.hs_id)
            else:
                self.push(t + self.timeout, _TIMEOUT, sender.id, "timeout", msg.hs_id)
            resp = resp_node.gts.on_request(msg)
            self._hs_trace(t, resp_node.id, resp, "accept" if resp.ok else "deny")
            if resp.ok and msg.op == "alloc":
                self.push(t + self.timeout, _TIMEOUT, resp_node.id, "timeout", msg.hs_id)
            self._send(t, resp_node, resp, None)
            return
        parties = (msg.initiator, msg.responder)
        for r in receivers:
            if r.id in parties:
                continue
            undone, deallocs = r.gts.detect_inconsistency_and_rollback(msg)
            for e in undone:
                self.trace.add(t, "hs", r.id, "alloc", "overheard", e.kind.value, e.slot, e.channel, 1, "rollback")
            for d in deallocs:
                self._hs_trace(t, r.id, d, "request")
                self._send(t, r, d, d.responder)
        by_id = {r.id: r for r in receivers}
        if msg.cls == "response" and msg.initiator in by_id:
            init = by_id[msg.initiator]
            notify, committed = init.gts.on_response(msg, self._activate_at(t, msg.kind))
            if msg.op == "alloc":
                self._hs_trace(t, init.id, msg, "commit" if committed else "rollback")
                self._check_commit(t, init, committed)
            if notify is not None:
                self._send(t, init, notify, None)
            self._replan(t, init.id)
        elif msg.cls == "notify" and msg.responder in by_id and msg.op == "alloc":
            resp = by_id[msg.responder]
            committed = resp.gts.on_notify(msg, self._activate_at(t, msg.kind))
            self._hs_trace(t, resp.id, msg, "commit" if committed else "rollback")
            self._check_commit(t, resp, committed)

    def _on_timeout(self, t: int, n: int, hs_id: int) -> None:
        node = self.nodes[n]
        hs = node.gts.handshakes.get(hs_id)
        if hs is None or not hs.open:
            return
        node.gts.rollback(hs_id)
        self.trace.add(t, "hs", n, hs.op, "timeout", hs.kind.value, -1, -1, 0, "rollback")
        if hs.initiator == n:
            self._replan(t, n)


def run(scenario: Scenario, seed: int) -> Trace:
    """Simulate one replication; identical inputs give identical traces."""
    return Simulator(scenario, seed).run()
