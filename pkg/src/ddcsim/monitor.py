"""Rack-level health monitor.

Compute elements beat over the interconnect; the monitor scans on the same
cadence and declares an element failed once now - last_seen exceeds
interval * miss_threshold. Detection runs any fast failure handlers
registered by hosted processes (declarative step lists executed in one
event, in an isolated control-plane context that can never touch frames),
then notifies registered contact groups. The monitor is deliberately a
single point of failure; end-to-end timeouts remain the backstop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


@dataclass(frozen=True)
class Beat:
    element: str


@dataclass(frozen=True)
class ScanTick:
    pass


@dataclass(frozen=True)
class FastFailureHandler:
    """Steps: ("provision", behavior dict), ("steal-to-provisioned", None),
    ("notify", tuple of pids). Provision binds the new pid for later steps."""
    owner_pid: int
    steps: tuple


class RackMonitor:
    def __init__(self, sim, cluster, rack: int, interval: int, miss_threshold: int):
        self.sim = sim
        self.cluster = cluster
        self.rack = rack
        self.element_id = f"r{rack}.mon"
        self.interval = interval
        self.miss_threshold = miss_threshold
        self.alive = True
        self.last_seen: dict[str, int] = {}
        self.declared: set[str] = set()
        self.handlers: dict[int, FastFailureHandler] = {}
        self.notify_groups: dict[int, frozenset] = {}
        sim.add_actor(self)
        sim.schedule(self.element_id, ScanTick(), extra_delay=interval)

    def register_handler(self, pid: int, handler: FastFailureHandler) -> None:
        self.handlers[pid] = handler

    def register_notify_group(self, pid: int, members) -> None:
        self.notify_groups[pid] = frozenset(members)

    def fail(self) -> None:
        self.alive = False
        self.sim.trace_record(self.element_id, "monitor-failed")

    def on_event(self, msg) -> None:
        if not self.alive:
            return
        if isinstance(msg, Beat):
            self.last_seen[msg.element] = self.sim.now
        elif isinstance(msg, ScanTick):
            self._scan()
            self.sim.schedule(self.element_id, ScanTick(), extra_delay=self.interval)

    def _scan(self) -> None:
        deadline = self.interval * self.miss_threshold
        for element in sorted(self.last_seen):
            if element in self.declared:
                continue
            if self.sim.now - self.last_seen[element] > deadline:
                self._declare(element)

    def _declare(self, element: str) -> None:
        self.declared.add(element)
        self.sim.trace_record(self.element_id, "detect", element=element)
        # a declared-dead element is fenced off the ToR before any recovery
        # runs, so a later revival cannot talk its way back in
        self.cluster.fence(element)
        hosted = self.cluster.pids_on_element(element)
        for pid in hosted:
            handler = self.handlers.get(pid)
            if handler is not None:
                self._run_handler(pid, handler, element)
        for pid in hosted:
            members = self.notify_groups.get(pid)
            if members:
                self._notify(members, {"failure": "compute", "element": element,
                                       "pid": pid})

    def _run_handler(self, pid: int, handler: FastFailureHandler, element: str) -> None:
        """Execute the step list sequentially within this event. Steps only
        issue control-plane requests; a failed step is recorded and later
        steps still run (the notify step carries the outcome)."""
        from .mmu import MmuError

        new_pid: Optional[int] = None
        steal_ok = False
        error = None
        for step, arg in handler.steps:
            if step == "provision":
                new_pid = self.cluster.provision(self.rack, dict(arg))
                self.sim.trace_record(self.element_id, "handler-step", pid=pid,
                                      step=step, ok=True, new_pid=new_pid)
            elif step == "steal-to-provisioned":
                mmu = self.cluster.rack_mmu(self.rack)
                try:
                    # the handler carries its registrant's capability; the
                    # freshly provisioned process receives the mappings
                    moved = mmu.steal(handler.owner_pid, handler.owner_pid,
                                      "all", recipient=new_pid)
                    if moved:
                        self.cluster.signal_page_added(new_pid, moved,
                                                       src=handler.owner_pid)
                    steal_ok = True
                    self.sim.trace_record(self.element_id, "handler-step",
                                          pid=pid, step=step, ok=True,
                                          n=len(moved))
                except MmuError as err:
                    error = err.code
                    self.sim.trace_record(self.element_id, "handler-step",
                                          pid=pid, step=step, ok=False,
                                          error=err.code)
            elif step == "notify":
                detail = {"failure": "compute", "element": element, "pid": pid,
                          "steal_ok": steal_ok, "new_pid": new_pid}
                if error:
                    detail["error"] = error
                self._notify(arg, detail)
                self.sim.trace_record(self.element_id, "handler-step", pid=pid,
                                      step=step, ok=True)
        self.sim.trace_record(self.element_id, "handler-run", pid=pid)

    def _notify(self, members, detail: dict) -> None:
        from .computeos import GROUP_FAILURE_NOTICE, Signal, SignalMsg

        for member in sorted(members):
            info = self.cluster.process_info(member)
            if info is None:
                continue
            link = self.cluster.link_between(self.element_id, info.element_id)
            sig = Signal(GROUP_FAILURE_NOTICE, dict(detail))
            self.sim.send(self.element_id, info.element_id,
                          SignalMsg(member, sig), link)
