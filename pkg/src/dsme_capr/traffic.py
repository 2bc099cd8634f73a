"""Convergecast topology and packet generators."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frame_structure import ConfigError


@dataclass(frozen=True)
class Topology:
    parent: dict[int, int | None]
    sink: int = 0
    hop: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.parent.get(self.sink, "missing") is not None:
            raise ConfigError(f"sink {self.sink} must have no parent")
        hops: dict[int, int] = {self.sink: 0}
        for node in self.parent:
            chain = []
            cur = node
            while cur not in hops:
                chain.append(cur)
                cur = self.parent.get(cur)
                if cur is None or cur in chain:
                    raise ConfigError(f"node {node} is not connected to the sink")
            base = hops[cur]
            for depth, n in enumerate(reversed(chain), start=1):
                hops[n] = base + depth
        object.__setattr__(self, "hop", hops)

    @property
    def nodes(self) -> list[int]:
        return sorted(self.parent)

    def children(self, node: int) -> list[int]:
        return sorted(n for n, p in self.parent.items() if p == node)

    def subtree_size(self, node: int) -> int:
        return 1 + sum(self.subtree_size(c) for c in self.children(node))

    def hop_groups(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for n in self.nodes:
            groups.setdefault(self.hop[n], []).append(n)
        return groups

    def path_to_sink(self, node: int) -> list[int]:
        path = [node]
        while path[-1] != self.sink:
            path.append(self.parent[path[-1]])
        return path


def build_binary_tree(n: int) -> Topology:
    """Complete binary tree in level order; node 0 is the sink."""
    if n < 1:
        raise ConfigError("a tree needs at least one node")
    parent: dict[int, int | None] = {0: None}
    for i in range(1, n):
        parent[i] = (i - 1) // 2
    return Topology(parent)


def load_edge_list(path: str | Path) -> Topology:
    """Read ``child parent`` pairs, one per line; the node without parent is the sink."""
    parent: dict[int, int | None] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'child parent'")
        child, par = int(parts[0]), int(parts[1])
        if child in parent:
            raise ConfigError(f"{path}:{lineno}: node {child} has two parents")
        parent[child] = par
        parent.setdefault(par, None)
    roots = [n for n, p in parent.items() if p is None]
    if len(roots) != 1:
        raise ConfigError(f"{path}: expected exactly one sink, found {roots}")
    return Topology(parent, sink=roots[0])


class Pattern(str, enum.Enum):
    RATE = "rate"
    BURST = "burst"


@dataclass(frozen=True)
class TrafficConfig:
    pattern: Pattern = Pattern.RATE
    delta: int = 1
    interval_s: float = 1.0
    # place packets (rate) or bursts (burst) uniformly inside each interval
    uniform_placement: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if self.interval_s <= 0:
            raise ConfigError("observation interval must be positive")

    @property
    def lam(self) -> float:
        """Mean number of generation events per interval."""
        return float(self.delta) if self.pattern is Pattern.RATE else 1.0


def node_rng(seed: int, node: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, node, stream])))


def generate(config: TrafficConfig, node: int, duration_s: float, seed: int, sink: int = 0) -> list[float]:
    """Packet generation times (seconds) of one node over ``duration_s``."""
    if duration_s <= 0:
        raise ConfigError("run length must be positive")
    if node == sink:
        return []
    rng = node_rng(seed, node, stream=1)
    n_intervals = int(np.ceil(duration_s / config.interval_s))
    events = rng.poisson(config.lam, size=n_intervals)
    per_event = 1 if config.pattern is Pattern.RATE else config.delta
    times: list[float] = []
    for k, count in enumerate(events):
        start = k * config.interval_s
        if config.uniform_placement:
            offsets = np.sort(rng.uniform(0.0, config.interval_s, size=count))
        else:
            offsets = np.zeros(count)
        for off in offsets:
            t = start + float(off)
            if t < duration_s:
                times.extend([t] * per_event)
    return times
