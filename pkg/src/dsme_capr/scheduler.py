"""Traffic-aware GTS demand estimation and per-mode (de)allocation planning.

Each link keeps an exponentially weighted moving average of the packets
offered to it per multisuperframe.  The target number of slots is the
ceiling of that average; a hysteresis band and a slot expiration timer keep
the schedule from oscillating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable

from .frame_structure import ConfigError, Mode
from .gts import GtsKind


@dataclass(frozen=True)
class SchedulerConfig:
    alpha: float = 0.1
    hysteresis_margin: int = 1
    expiration_msfs: int = 7
    # take the first measured MSF as the initial average instead of 0
    prime_with_first_sample: bool = True

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must be in (0, 1]")
        if self.hysteresis_margin < 0:
            raise ConfigError("hysteresis margin must be >= 0")
        if self.expiration_msfs < 1:
            raise ConfigError("expiration_msfs must be >= 1")


@dataclass(frozen=True)
class LinkEstimate:
    node: int
    parent: int
    ewma: float = 0.0
    alpha: float = 0.1
    allocated_cfp: int = 0
    allocated_cap: int = 0
    idle_msfs: int = 0
    # slots whose idle counter passed the expiration timer
    expired_cfp: int = 0
    expired_cap: int = 0
    # tuples still obtainable on this link, as seen by the node
    free_cfp: int = 0
    free_cap: int = 0
    hop: int = 0
    samples: int = 0

    def __post_init__(self):
        if self.ewma < 0:
            raise ValueError("ewma must be non-negative")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")

    @property
    def allocated(self) -> int:
        return self.allocated_cfp + self.allocated_cap


def update_estimate(est: LinkEstimate, arrivals: int, cfg: SchedulerConfig | None = None) -> LinkEstimate:
    """Fold one MSF worth of offered packets into the moving average."""
    if arrivals < 0:
        raise ValueError("arrivals must be >= 0")
    alpha = est.alpha if cfg is None else cfg.alpha
    prime = cfg is not None and cfg.prime_with_first_sample and est.samples == 0
    ewma = float(arrivals) if prime else alpha * arrivals + (1 - alpha) * est.ewma
    return replace(est, ewma=ewma, alpha=alpha, samples=est.samples + 1)


def target_slots(est: LinkEstimate, cfg: SchedulerConfig) -> int:
    """Signed change in slots: positive allocates, negative releases."""
    alloc = est.allocated
    target = math.ceil(est.ewma - 1e-9)
    if alloc == 0:
        # nothing to keep stable yet; open the link as soon as there is demand
        return max(target, 0)
    if target > alloc + cfg.hysteresis_margin:
        return target - alloc
    expired = est.expired_cfp + est.expired_cap
    if target == 0:
        # the last slots go only once the expiration timer has run out
        return -expired
    if target < alloc - cfg.hysteresis_margin:
        return -min(alloc - target, expired)
    return 0


@dataclass(frozen=True)
class Intent:
    node: int
    counterpart: int
    action: str  # "allocate" | "deallocate"
    kind: GtsKind
    count: int


_GROUP = {
    ("allocate", GtsKind.CFP): 0,
    ("allocate", GtsKind.CAP): 1,
    ("deallocate", GtsKind.CAP): 2,
    ("deallocate", GtsKind.CFP): 3,
}


def plan_negotiations(mode: Mode | str, estimates: Iterable[LinkEstimate], cfg: SchedulerConfig) -> list[Intent]:
    """Ordered (de)allocation intents for one planning tick.

    CFP-GTS allocations come before CAP-GTS allocations and CAP-GTS releases
    before CFP-GTS releases.  Within a group links closer to the sink go first.
    """
    mode = Mode.parse(mode)
    intents: list[tuple[int, int, int, Intent]] = []

    def add(est: LinkEstimate, action: str, kind: GtsKind, count: int):
        if count > 0:
            intents.append((_GROUP[(action, kind)], est.hop, est.node,
                            Intent(est.node, est.parent, action, kind, count)))

    for est in estimates:
        change = target_slots(est, cfg)
        if change > 0:
            cfp = min(change, est.free_cfp)
            add(est, "allocate", GtsKind.CFP, cfp)
            if mode is Mode.ACR:
                add(est, "allocate", GtsKind.CAP, min(change - cfp, est.free_cap))
            elif mode is Mode.DCR and est.free_cfp == 0:
                add(est, "allocate", GtsKind.CAP, min(change, est.free_cap))
        elif change < 0:
            release = -change
            cap = min(release, est.expired_cap) if mode in (Mode.ACR, Mode.DCR) else 0
            add(est, "deallocate", GtsKind.CAP, cap)
            add(est, "deallocate", GtsKind.CFP, min(release - cap, est.expired_cfp))
    intents.sort(key=lambda x: x[:3])
    return [i for *_, i in intents]
