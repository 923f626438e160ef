"""Per-compute-element OS: processes, syscalls, signals, remote access.

Processes are event handlers over explicit state: a handler runs to
completion inside one event and continues by scheduling messages, timers, or
memory operations. Multi-access memory operations (heap transactions,
recovery scans) run as OS-owned microprograms; when a process crashes or its
pages are stolen, in-flight microprograms are dropped wholesale, so nothing
survives reassignment except what reached remote memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .element import AccessReply, AccessRequest
from .latency import LinkClass
from .mmu import MmuReply, MmuRequest

MEMORY_FAULT = "memory-fault"
PAGE_ADDED = "page-added"
GROUP_FAILURE_NOTICE = "group-failure-notice"


@dataclass(frozen=True)
class Signal:
    kind: str
    detail: dict


@dataclass(frozen=True)
class SignalMsg:
    pid: int
    signal: Signal


@dataclass(frozen=True)
class DeliverMessage:
    pid: int
    payload: object
    src_pid: int
    src_element: str


@dataclass(frozen=True)
class TimerMsg:
    pid: int
    name: str
    gen: int
    data: object = None


@dataclass(frozen=True)
class StartMsg:
    pid: int


@dataclass(frozen=True)
class AccessTimeout:
    req_id: int


@dataclass(frozen=True)
class FabricFault:
    """Synthesized fault for an access the fabric could not route."""
    req_id: int
    vaddr: int


@dataclass(frozen=True)
class BeatTick:
    pass


class Process:
    """Base class for simulated processes (one logical thread each)."""

    def __init__(self, pid: int, os: "ComputeElement"):
        self.pid = pid
        self.os = os
        self.state = "running"
        self.signal_handlers: dict[str, Callable[[Signal], None]] = {}

    # overridable event handlers
    def on_start(self) -> None:
        pass

    def on_message(self, payload, src_pid: int) -> None:
        pass

    def on_timer(self, name: str, data) -> None:
        pass

    def on_revive(self) -> None:
        pass


def read_op(ranges, ctx: str = ""):
    """Microprogram intent: bulk read of [(vaddr, length), ...]."""
    return ("r", tuple(ranges), None, ctx)


def write_op(vaddr: int, data: bytes, ctx: str = ""):
    return ("w", ((vaddr, len(data)),), data, ctx)


def _single_read(vaddr: int, length: int, ctx: str):
    result = yield read_op([(vaddr, length)], ctx)
    return result


def _single_write(vaddr: int, data: bytes, ctx: str):
    yield write_op(vaddr, data, ctx)


@dataclass
class _PendingAccess:
    pid: int
    gen: object                       # the driving microprogram
    on_done: Optional[Callable]
    waiting: dict = field(default_factory=dict)   # sub req_id -> (orders, element)
    parts: dict = field(default_factory=dict)     # segment order -> bytes
    seg_lengths: dict = field(default_factory=dict)
    op: str = "r"
    done: bool = False


class TranslationCache:
    """Element-local (pid, vpage) -> memory element routing cache."""

    def __init__(self):
        self.entries: dict[tuple[int, int], str] = {}
        self.generation = 0

    def invalidate(self, pid: int, vpages) -> int:
        for vp in vpages:
            self.entries.pop((pid, vp), None)
        self.generation += 1
        return self.generation


class ComputeElement:
    def __init__(self, sim, cluster, element_id: str, rack: int):
        self.sim = sim
        self.cluster = cluster
        self.element_id = element_id
        self.rack = rack
        self.alive = True
        self.processes: dict[int, Process] = {}
        self.forwarding: dict[int, list[tuple[int, frozenset]]] = {}
        self.tcache = TranslationCache()
        self._pending_access: dict[int, _PendingAccess] = {}
        self._pending_mmu: dict[int, tuple[int, Optional[Callable]]] = {}
        self._req_counter = 0
        self._timer_gen: dict[tuple[int, str], int] = {}
        self._fwd_gid = 0
        self._beating = False
        sim.add_actor(self)

    # ------------------------------------------------------------- processes

    def add_process(self, process: Process, start: bool = True) -> None:
        self.processes[process.pid] = process
        if start:
            self.sim.schedule(self.element_id, StartMsg(process.pid))
        self._ensure_heartbeat()

    def running(self, pid: int) -> bool:
        proc = self.processes.get(pid)
        return self.alive and proc is not None and proc.state == "running"

    def crash_process(self, pid: int) -> None:
        proc = self.processes.get(pid)
        if proc is None or proc.state == "crashed":
            return
        proc.state = "crashed"
        self._drop_pid_work(pid)
        self.cluster.note_process_crashed(pid)
        self.sim.trace_record(self.element_id, "process-crashed", pid=pid)

    def crash_element(self) -> None:
        """Fail-stop the whole element: processes halt, forwarding tables die.

        Rack MMU tables and memory-element contents are untouched (failure
        independence)."""
        if not self.alive:
            return
        self.alive = False
        for pid, proc in self.processes.items():
            if proc.state == "running":
                proc.state = "crashed"
                self.cluster.note_process_crashed(pid)
        self.forwarding.clear()
        self._pending_access.clear()
        self._pending_mmu.clear()
        self.sim.trace_record(self.element_id, "compute-failed",
                              pids=sorted(self.processes))

    def revive_zombie(self) -> None:
        """Non-fail-stop return of a crashed element (for fencing tests)."""
        if self.alive:
            return
        self.alive = True
        self.sim.trace_record(self.element_id, "compute-revived",
                              pids=sorted(self.processes))
        for pid in sorted(self.processes):
            proc = self.processes[pid]
            proc.state = "running"
            self.cluster.note_process_running(pid)
            proc.on_revive()

    def _drop_pid_work(self, pid: int) -> None:
        self._pending_access = {r: p for r, p in self._pending_access.items()
                                if p.pid != pid}
        self._pending_mmu = {r: v for r, v in self._pending_mmu.items()
                             if v[0] != pid}

    # ------------------------------------------------------------ event loop

    def on_event(self, msg) -> None:
        if not self.alive:
            return
        if isinstance(msg, AccessReply):
            self._on_access_reply(msg)
        elif isinstance(msg, DeliverMessage):
            proc = self.processes.get(msg.pid)
            if proc is not None and proc.state == "running":
                proc.on_message(msg.payload, msg.src_pid)
            else:
                self.sim.trace_record(self.element_id, "msg-dropped",
                                      pid=msg.pid, src=msg.src_pid)
        elif isinstance(msg, SignalMsg):
            self.deliver_signal(msg.pid, msg.signal)
        elif isinstance(msg, TimerMsg):
            if self._timer_gen.get((msg.pid, msg.name)) == msg.gen and self.running(msg.pid):
                self.processes[msg.pid].on_timer(msg.name, msg.data)
        elif isinstance(msg, StartMsg):
            if self.running(msg.pid):
                self.processes[msg.pid].on_start()
        elif isinstance(msg, MmuReply):
            entry = self._pending_mmu.pop(msg.req_id, None)
            if entry is not None:
                pid, on_done = entry
                if on_done is not None and self.running(pid):
                    on_done(msg)
        elif isinstance(msg, AccessTimeout):
            self._on_access_timeout(msg.req_id)
        elif isinstance(msg, FabricFault):
            pending = self._pending_access.pop(msg.req_id, None)
            if pending is not None:
                self._fault(pending, "no-entry", msg.vaddr, element="fabric")
        elif isinstance(msg, BeatTick):
            self._beat()

    # ---------------------------------------------------------------- signals

    def deliver_signal(self, pid: int, sig: Signal) -> None:
        proc = self.processes.get(pid)
        if proc is None or proc.state != "running":
            return
        handler = proc.signal_handlers.get(sig.kind)
        self.sim.trace_record(self.element_id, "signal", pid=pid, sig=sig.kind,
                              handled=handler is not None,
                              detail={k: v for k, v in sig.detail.items()
                                      if isinstance(v, (int, str, float, bool))})
        if handler is not None:
            handler(sig)
        elif sig.kind == MEMORY_FAULT:
            # default disposition: an unhandled fault kills the process
            self.crash_process(pid)

    # ---------------------------------------------------------------- timers

    def set_timer(self, pid: int, name: str, delay: int, data=None) -> None:
        gen = self._timer_gen.get((pid, name), 0) + 1
        self._timer_gen[(pid, name)] = gen
        self.sim.schedule(self.element_id, TimerMsg(pid, name, gen, data),
                          extra_delay=delay)

    def cancel_timer(self, pid: int, name: str) -> None:
        self._timer_gen[(pid, name)] = self._timer_gen.get((pid, name), 0) + 1

    # ------------------------------------------------------------- messaging

    def send_to_process(self, src_pid: int, dst_pid: int, payload,
                        payload_bytes: int = 0) -> None:
        info = self.cluster.process_info(dst_pid)
        if info is None:
            self.sim.trace_record(self.element_id, "msg-dropped", pid=dst_pid,
                                  src=src_pid)
            return
        msg = DeliverMessage(dst_pid, payload, src_pid, self.element_id)
        if info.element_id == self.element_id:
            self.sim.schedule(self.element_id, msg)
            return
        link = self.cluster.link_between(self.element_id, info.element_id)
        self.sim.send(self.element_id, info.element_id, msg, link,
                      payload_bytes=payload_bytes)

    # -------------------------------------------------------------- syscalls

    def _mmu_call(self, pid: int, kind: str, args: tuple,
                  on_done: Optional[Callable], rack: Optional[int] = None) -> None:
        self._req_counter += 1
        req = MmuRequest(self._req_counter, self.element_id, pid, kind, args)
        self._pending_mmu[req.req_id] = (pid, self._wrap_syscall(pid, kind, on_done))
        mmu_id = self.cluster.mmu_id(self.rack if rack is None else rack)
        link = self.cluster.link_between(self.element_id, mmu_id)
        self.sim.send(self.element_id, mmu_id, req, link)

    def _wrap_syscall(self, pid: int, name: str, on_done: Optional[Callable]):
        def finish(reply: MmuReply):
            self.sim.trace_record(self.element_id, "syscall", pid=pid,
                                  syscall=name,
                                  outcome="ok" if reply.ok else reply.error)
            if on_done is not None:
                on_done(reply)
        return finish

    def sys_allocate(self, pid: int, n_pages: int, allow_steal: bool = True,
                     on_done: Optional[Callable] = None) -> None:
        self._mmu_call(pid, "allocate", (n_pages, allow_steal), on_done)

    def sys_grant(self, pid: int, pages, dst: int,
                  on_done: Optional[Callable] = None) -> None:
        self._mmu_call(pid, "grant", (tuple(pages), dst), on_done)

    def sys_steal(self, pid: int, src: int, pages="all",
                  on_done: Optional[Callable] = None,
                  recipient: Optional[int] = None,
                  rack: Optional[int] = None) -> None:
        args = (src, "all" if pages == "all" else tuple(pages), recipient)
        self._mmu_call(pid, "steal", args, on_done, rack=rack)

    def sys_revoke(self, pid: int, pages,
                   on_done: Optional[Callable] = None,
                   rack: Optional[int] = None) -> None:
        self._mmu_call(pid, "revoke", (tuple(pages),), on_done, rack=rack)

    def sys_register_group(self, pid: int, members,
                           on_done: Optional[Callable] = None) -> None:
        self._mmu_call(pid, "register-group", (frozenset(members),), on_done)

    def sys_provision(self, pid: int, behavior: dict, rack: Optional[int] = None,
                      on_done: Optional[Callable] = None) -> None:
        self._mmu_call(pid, "provision", (behavior, rack), on_done, rack=rack)

    def sys_register_failure_group(self, pid: int, members) -> int:
        """Record emergency contacts in the per-process forwarding table."""
        members = frozenset(members)
        for member in members:
            if self.cluster.process_info(member) is None:
                raise ValueError(f"unknown-member: {member}")
        self._fwd_gid += 1
        self.forwarding.setdefault(pid, []).append((self._fwd_gid, members))
        self.sim.trace_record(self.element_id, "syscall", pid=pid,
                              syscall="register-failure-group", outcome="ok",
                              members=sorted(members))
        return self._fwd_gid

    def sys_notify_group(self, pid: int, error: dict) -> None:
        """Broadcast a failure descriptor to every registered contact."""
        groups = self.forwarding.get(pid)
        if not groups:
            raise ValueError("no-group-registered")
        self.sim.trace_record(self.element_id, "notify-group", pid=pid,
                              error={k: v for k, v in error.items()
                                     if isinstance(v, (int, str, float, bool))})
        seen = set()
        for _gid, members in groups:
            for member in sorted(members):
                if member == pid or member in seen:
                    continue
                seen.add(member)
                info = self.cluster.process_info(member)
                if info is None:
                    continue
                link = self.cluster.link_between(self.element_id, info.element_id)
                sig = Signal(GROUP_FAILURE_NOTICE, dict(error))
                self.sim.send(self.element_id, info.element_id,
                              SignalMsg(member, sig), link)

    # ---------------------------------------------------------- memory access

    def read(self, pid: int, vaddr: int, length: int,
             on_done: Callable, ctx: str = "") -> None:
        self.start_op(pid, _single_read(vaddr, length, ctx), on_done)

    def write(self, pid: int, vaddr: int, data: bytes,
              on_done: Optional[Callable] = None, ctx: str = "") -> None:
        self.start_op(pid, _single_write(vaddr, data, ctx), on_done)

    def start_op(self, pid: int, gen, on_done: Optional[Callable] = None) -> None:
        """Drive a memory microprogram: a generator yielding read/write
        intents, resumed with each result. Dropped if the process dies."""
        if not self.running(pid):
            return
        pending = _PendingAccess(pid=pid, gen=gen, on_done=on_done)
        self._advance(pending, None)

    def _advance(self, pending: _PendingAccess, value) -> None:
        try:
            intent = pending.gen.send(value)
        except StopIteration as stop:
            if pending.on_done is not None and self.running(pending.pid):
                pending.on_done(stop.value)
            return
        self._issue(pending, intent)

    def _issue(self, pending: _PendingAccess, intent) -> None:
        op, ranges, data, ctx = intent
        pending.op = op
        pending.parts = {}
        pending.waiting = {}
        pending.seg_lengths = {}
        # split ranges into page-sized segments, each routed independently;
        # one bulk sub-request per memory element, fanned out in parallel
        page_size = self.cluster.addressing.page_size
        segments = []  # (order, vaddr, length, write slice)
        cursor = 0
        order = 0
        for vaddr, length in ranges:
            pos = 0
            while pos < length:
                offset = self.cluster.addressing.offset(vaddr + pos)
                chunk = min(length - pos, page_size - offset)
                piece = data[cursor + pos:cursor + pos + chunk] if op == "w" else None
                segments.append((order, vaddr + pos, chunk, piece))
                pending.seg_lengths[order] = chunk
                pos += chunk
                order += 1
            cursor += length
        if not segments:
            self._advance(pending, b"" if op == "r" else True)
            return
        by_element: dict[str, list] = {}
        for seg in segments:
            element = self._route(pending.pid, seg[1])
            if element is None:
                # unroutable address: the fabric answers with a fault after
                # one full interconnect round trip
                self._req_counter += 1
                req_id = self._req_counter
                self._pending_access[req_id] = pending
                pending.waiting[req_id] = ((), "fabric")
                self.sim.schedule(
                    self.element_id, FabricFault(req_id, seg[1]),
                    extra_delay=self.sim.rtt(LinkClass.RACK_MMU_INTERCONNECT))
                return
            by_element.setdefault(element, []).append(seg)
        for element, segs in sorted(by_element.items()):
            sub_ranges = tuple((vaddr, length) for _o, vaddr, length, _d in segs)
            sub_data = b"".join(d for _o, _v, _l, d in segs) if op == "w" else None
            self._req_counter += 1
            req_id = self._req_counter
            req = AccessRequest(req_id, self.element_id, pending.pid, op,
                                sub_ranges, sub_data, ctx)
            self._pending_access[req_id] = pending
            pending.waiting[req_id] = (tuple(o for o, _v, _l, _d in segs), element)
            self.sim.send(self.element_id, element, req,
                          LinkClass.RACK_MMU_INTERCONNECT)
            self.sim.schedule(self.element_id, AccessTimeout(req_id),
                              extra_delay=self.cluster.access_timeout)

    def _route(self, pid: int, vaddr: int) -> Optional[str]:
        """Resolve the memory element for an access: translation cache first,
        then the fabric's live mapping (which also refills the cache)."""
        vpage = self.cluster.addressing.vpage(vaddr)
        cached = self.tcache.entries.get((pid, vpage))
        if cached is not None:
            return cached
        frame = self.cluster.lookup_mapping(self.rack, pid, vpage)
        if frame is None:
            return None
        self.tcache.entries[(pid, vpage)] = frame.element
        return frame.element

    def invalidate_translations(self, pid: int, vpages) -> None:
        self.tcache.invalidate(pid, vpages)
        self.sim.trace_record(self.element_id, "cache-invalidate", pid=pid,
                              n=len(list(vpages)))

    def _on_access_reply(self, reply: AccessReply) -> None:
        pending = self._pending_access.pop(reply.req_id, None)
        if pending is None or pending.done:
            return
        orders, element = pending.waiting.pop(reply.req_id)
        if not reply.ok:
            self._abort_siblings(pending)
            self._fault(pending, reply.error, reply.vaddr, element=element)
            return
        if pending.op == "r":
            cursor = 0
            for order in orders:
                length = pending.seg_lengths[order]
                pending.parts[order] = reply.data[cursor:cursor + length]
                cursor += length
        if pending.waiting:
            return
        if pending.op == "r":
            value = b"".join(pending.parts[o] for o in sorted(pending.parts))
        else:
            value = True
        if self.running(pending.pid):
            self._advance(pending, value)

    def _abort_siblings(self, pending: _PendingAccess) -> None:
        stale = [rid for rid, p in self._pending_access.items() if p is pending]
        for rid in stale:
            del self._pending_access[rid]
        pending.done = True

    def _on_access_timeout(self, req_id: int) -> None:
        pending = self._pending_access.pop(req_id, None)
        if pending is None or pending.done:
            return
        spec = pending.waiting.get(req_id, (None, "unknown"))
        self._abort_siblings(pending)
        self.sim.trace_record(self.element_id, "access-timeout", pid=pending.pid,
                              element=spec[1])
        self._fault(pending, "timeout", None, element=spec[1])

    def _fault(self, pending: _PendingAccess, error: str, vaddr, element: str) -> None:
        pending.done = True
        pending.gen.close()
        detail = {"error": error, "element": element}
        if vaddr is not None:
            detail["vaddr"] = vaddr
        self.deliver_signal(pending.pid, Signal(MEMORY_FAULT, detail))

    # -------------------------------------------------------------- heartbeat

    def _ensure_heartbeat(self) -> None:
        if self._beating or not self.cluster.monitor_enabled:
            return
        self._beating = True
        self.sim.schedule(self.element_id, BeatTick())

    def _beat(self) -> None:
        if not self.alive:
            return
        monitor = self.cluster.monitor_id(self.rack)
        if monitor is not None:
            from .monitor import Beat
            self.sim.send(self.element_id, monitor, Beat(self.element_id),
                          LinkClass.RACK_MMU_INTERCONNECT)
        self.sim.schedule(self.element_id, BeatTick(),
                          extra_delay=self.cluster.heartbeat_interval)
