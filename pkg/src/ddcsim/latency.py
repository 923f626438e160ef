"""Link classes and the round-trip latency model.

Three link classes cover the rack: the memory interconnect (also the Rack MMU
control path), the intra-rack top-of-rack switch, and the cross-rack path.
Profiles bundle one RTT per class; one-way latency is RTT/2.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .units import us


class LinkClass(enum.Enum):
    RACK_MMU_INTERCONNECT = "rack-mmu-interconnect"
    INTRA_RACK_TOR = "intra-rack-tor"
    CROSS_RACK_TOR = "cross-rack-tor"


TOR_CLASSES = (LinkClass.INTRA_RACK_TOR, LinkClass.CROSS_RACK_TOR)


@dataclass(frozen=True)
class LatencyModel:
    """Configured RTT per link class, in ticks, plus optional uniform jitter.

    jitter_fraction f in [0,1) stretches each one-way delay by a seeded
    uniform factor in [1, 1+f); f=0 draws nothing from the RNG, so
    deterministic runs are unaffected by message volume.
    """

    rtt_ticks: dict[LinkClass, int] = field(default_factory=dict)
    jitter_fraction: float = 0.0

    def __post_init__(self):
        missing = [lc for lc in LinkClass if lc not in self.rtt_ticks]
        if missing:
            raise ValueError(f"latency model missing link classes: {missing}")
        if not 0.0 <= self.jitter_fraction < 1.0:
            raise ValueError("jitter_fraction must be in [0, 1)")

    def rtt(self, link: LinkClass) -> int:
        return self.rtt_ticks[link]

    def one_way(self, link: LinkClass, rng=None) -> int:
        base = self.rtt_ticks[link] // 2
        if self.jitter_fraction and rng is not None:
            return base + int(base * self.jitter_fraction * rng.random())
        return base


def profile(name: str, jitter_fraction: float = 0.0,
            overrides: dict[str, float] | None = None) -> LatencyModel:
    """Build one of the bundled profiles, optionally overriding RTTs in us."""
    try:
        rtts = dict(_PROFILES[name])
    except KeyError:
        raise ValueError(f"unknown latency profile {name!r}; "
                         f"expected one of {sorted(_PROFILES)}") from None
    if overrides:
        for key, value in overrides.items():
            rtts[LinkClass(key)] = us(value)
    return LatencyModel(rtt_ticks=rtts, jitter_fraction=jitter_fraction)


# Measured/published mean RTTs: cross-rack cloud 45us, intra-rack 2us, and a
# next-generation 1us intra-rack NIC figure. The interconnect control path is
# assumed comparable to intra-rack. "cloud" and "current" carry the same
# numbers; they exist as distinct names for scenario intent (cross-rack
# deployments vs single-rack ones).
_PROFILES = {
    "current": {
        LinkClass.RACK_MMU_INTERCONNECT: us(2),
        LinkClass.INTRA_RACK_TOR: us(2),
        LinkClass.CROSS_RACK_TOR: us(45),
    },
    "future": {
        LinkClass.RACK_MMU_INTERCONNECT: us(1),
        LinkClass.INTRA_RACK_TOR: us(1),
        LinkClass.CROSS_RACK_TOR: us(45),
    },
    "cloud": {
        LinkClass.RACK_MMU_INTERCONNECT: us(2),
        LinkClass.INTRA_RACK_TOR: us(2),
        LinkClass.CROSS_RACK_TOR: us(45),
    },
}

PROFILE_NAMES = tuple(sorted(_PROFILES))
