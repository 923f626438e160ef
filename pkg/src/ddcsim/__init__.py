"""ddcsim: deterministic simulator of a disaggregated rack.

Compute and memory elements meet over a programmable memory interconnect
whose Rack MMU can reassign page mappings between processes (grant, steal)
and report failures early. Two workloads demonstrate the primitives: a
replicated state machine that reincarnates failed replicas from their
surviving memory, and a data-parallel shuffle that replaces byte copies
with page remapping.
"""

from .addressing import AddressConfig, FrameId
from .cluster import Cluster
from .engine import Simulator
from .latency import LatencyModel, LinkClass, profile
from .units import TICKS_PER_US, to_us, us

__version__ = "0.1.0"

__all__ = [
    "AddressConfig", "Cluster", "FrameId", "LatencyModel", "LinkClass",
    "Simulator", "TICKS_PER_US", "profile", "to_us", "us",
]
