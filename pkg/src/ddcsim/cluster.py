"""Rack assembly and cluster-global state.

A Cluster wires one Simulator to N racks (one Rack MMU, one monitor, compute
and memory elements each), owns the global process table and group registry,
and resolves link classes between elements. Multi-rack deployments model
cross-rack ToR paths; everything else stays within a rack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .addressing import AddressConfig, DEFAULT_ADDRESSING, FrameId
from .computeos import ComputeElement, Process, Signal, SignalMsg, PAGE_ADDED
from .element import MemoryElement
from .engine import Simulator
from .latency import LatencyModel, LinkClass
from .mmu import MmuError, RackMMU, Topology
from .monitor import RackMonitor
from .units import us


@dataclass
class ProcessInfo:
    pid: int
    element_id: str
    rack: int
    state: str  # "running" | "crashed"
    process: Process


@dataclass
class Rack:
    index: int
    mmu: RackMMU
    compute: list[ComputeElement] = field(default_factory=list)
    memory: list[MemoryElement] = field(default_factory=list)
    monitor: Optional[RackMonitor] = None


class Cluster:
    def __init__(self, latency: LatencyModel, seed: int = 0,
                 addressing: AddressConfig = DEFAULT_ADDRESSING,
                 collect_trace: bool = True,
                 access_timeout: Optional[int] = None,
                 heartbeat_interval: Optional[int] = None,
                 miss_threshold: int = 3,
                 monitor_enabled: bool = True):
        self.sim = Simulator(latency, seed=seed, collect_trace=collect_trace)
        self.addressing = addressing
        interconnect_rtt = latency.rtt(LinkClass.RACK_MMU_INTERCONNECT)
        self.access_timeout = access_timeout if access_timeout is not None else 5 * interconnect_rtt
        self.heartbeat_interval = (heartbeat_interval if heartbeat_interval is not None
                                   else 2 * interconnect_rtt)
        self.miss_threshold = miss_threshold
        self.monitor_enabled = monitor_enabled
        self.racks: list[Rack] = []
        self.processes: dict[int, ProcessInfo] = {}
        self.groups: dict[int, frozenset] = {}
        self.factories: dict[str, object] = {}
        self._next_pid = 1
        self._next_gid = 1

    # ------------------------------------------------------------------ build

    def add_rack(self, n_compute: int, n_memory: int, frames_per_element: int,
                 topology: Optional[Topology] = None) -> Rack:
        index = len(self.racks)
        memory = [MemoryElement(self.sim, f"r{index}.m{i}", index,
                                frames_per_element, self.addressing)
                  for i in range(n_memory)]
        mmu = RackMMU(self.sim, self, index, memory, self.addressing,
                      topology)
        rack = Rack(index=index, mmu=mmu, memory=memory)
        rack.compute = [ComputeElement(self.sim, self, f"r{index}.c{i}", index)
                        for i in range(n_compute)]
        if self.monitor_enabled:
            rack.monitor = RackMonitor(self.sim, self, index,
                                       self.heartbeat_interval,
                                       self.miss_threshold)
        self.racks.append(rack)
        return rack

    def register_factory(self, kind: str, factory) -> None:
        """factory(cluster, pid, os, params) -> Process, used by provision."""
        self.factories[kind] = factory

    # -------------------------------------------------------------- processes

    def spawn(self, rack: int, make_process, element_id: Optional[str] = None,
              start: bool = True) -> Process:
        """Create a process on a compute element (least-loaded by default)."""
        pid = self._next_pid
        if pid > self.addressing.max_pid:
            raise MmuError("out-of-pids")
        self._next_pid += 1
        os = self._pick_compute(rack, element_id)
        process = make_process(pid, os)
        self.processes[pid] = ProcessInfo(pid, os.element_id, rack, "running",
                                          process)
        os.add_process(process, start=start)
        self.sim.trace_record(os.element_id, "process-spawned", pid=pid)
        return process

    def provision(self, rack: int, behavior: dict) -> int:
        """Control-plane process creation from a behavior description."""
        kind = behavior["kind"]
        factory = self.factories.get(kind)
        if factory is None:
            raise MmuError("unknown-behavior", kind)
        params = behavior.get("params", {})
        proc = self.spawn(rack, lambda pid, os: factory(self, pid, os, params),
                          element_id=behavior.get("element"))
        return proc.pid

    def _pick_compute(self, rack: int, element_id: Optional[str]) -> ComputeElement:
        candidates = [c for c in self.racks[rack].compute if c.alive]
        if element_id is not None:
            for c in self.racks[rack].compute:
                if c.element_id == element_id:
                    return c
            raise MmuError("unknown-element", element_id)
        if not candidates:
            raise MmuError("no-compute-available", f"rack {rack}")
        def load(c):
            return sum(1 for p in c.processes.values() if p.state == "running")
        return min(candidates, key=lambda c: (load(c), c.element_id))

    def process_info(self, pid: int) -> Optional[ProcessInfo]:
        return self.processes.get(pid)

    def note_process_crashed(self, pid: int) -> None:
        info = self.processes.get(pid)
        if info is not None:
            info.state = "crashed"

    def note_process_running(self, pid: int) -> None:
        info = self.processes.get(pid)
        if info is not None:
            info.state = "running"

    def pids_on_element(self, element_id: str) -> list[int]:
        return sorted(pid for pid, info in self.processes.items()
                      if info.element_id == element_id)

    # ----------------------------------------------------------------- groups

    def register_group(self, members) -> int:
        members = frozenset(members)
        for pid in members:
            if pid not in self.processes:
                raise MmuError("unknown-process", f"pid {pid}")
        gid = self._next_gid
        self._next_gid += 1
        self.groups[gid] = members
        return gid

    def share_group(self, a: int, b: int) -> bool:
        return any(a in members and b in members for members in self.groups.values())

    # ------------------------------------------------------------- fabric ops

    def rack_mmu(self, rack: int) -> RackMMU:
        return self.racks[rack].mmu

    def mmu_id(self, rack: int) -> str:
        return self.racks[rack].mmu.element_id

    def monitor_id(self, rack: int) -> Optional[str]:
        monitor = self.racks[rack].monitor
        return monitor.element_id if monitor is not None and monitor.alive else None

    def lookup_mapping(self, rack: int, pid: int, vpage: int) -> Optional[FrameId]:
        entry = self.racks[rack].mmu.table_for(pid).entries.get(vpage)
        return entry.frame if entry is not None else None

    def invalidate_translations(self, pid: int, vpages) -> None:
        info = self.processes.get(pid)
        if info is None:
            return
        element = self.sim.actors.get(info.element_id)
        if element is not None and element.alive:
            element.invalidate_translations(pid, vpages)

    def signal_page_added(self, pid: int, vaddrs, src: int) -> None:
        info = self.processes.get(pid)
        if info is None:
            return
        sig = Signal(PAGE_ADDED, {"vaddrs": tuple(vaddrs), "src": src})
        mmu_id = self.mmu_id(info.rack)
        self.sim.send(mmu_id, info.element_id, SignalMsg(pid, sig),
                      LinkClass.RACK_MMU_INTERCONNECT)

    def link_between(self, a_id: str, b_id: str) -> LinkClass:
        a = self.sim.actors[a_id]
        b = self.sim.actors[b_id]
        if a.rack != b.rack:
            return LinkClass.CROSS_RACK_TOR
        if isinstance(a, ComputeElement) and isinstance(b, ComputeElement):
            return LinkClass.INTRA_RACK_TOR
        return LinkClass.RACK_MMU_INTERCONNECT

    # ------------------------------------------------------- failure injection

    def crash_process(self, pid: int) -> None:
        info = self.processes.get(pid)
        if info is not None:
            self.sim.actors[info.element_id].crash_process(pid)

    def crash_compute(self, element_id: str) -> None:
        self.sim.actors[element_id].crash_element()

    def revive_compute(self, element_id: str) -> None:
        self.sim.actors[element_id].revive_zombie()

    def fail_memory(self, element_id: str, mode: str = "silent") -> None:
        self.sim.actors[element_id].inject_failure(mode)

    def fail_monitor(self, rack: int) -> None:
        monitor = self.racks[rack].monitor
        if monitor is not None:
            monitor.fail()

    def fence(self, element_id: str) -> None:
        self.sim.fence(element_id)
