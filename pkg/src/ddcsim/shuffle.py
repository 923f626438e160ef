"""Data-parallel transfer workload.

Partitions live in the producer's remote pages. Moving one to a consumer
either copies bytes along the conventional path (memory read, ToR send,
memory write: three round trips) or reassigns the pages with a grant (one
control round trip on the memory interconnect, zero bytes over ToR). A
second scenario runs timed work units with progress persisted in an undo-log
arena so a straggling task can be stolen and resumed instead of restarted.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from .ccheap import Arena, op_recover
from .cluster import Cluster
from .computeos import Process
from .units import to_us, us


@dataclass(frozen=True)
class TaskGraph:
    """Stage-structured transfer plan: stages of node ids plus directed
    (producer, consumer, edge id) triples. Stage ordering keeps it acyclic:
    every edge goes from one stage to the next."""

    stages: tuple          # tuple of tuples of node indices
    edges: tuple           # ((producer, consumer, edge_id), ...)

    @classmethod
    def bipartite(cls, mappers: int, reducers: int) -> "TaskGraph":
        stages = (tuple(range(mappers)),
                  tuple(range(mappers, mappers + reducers)))
        edges = tuple((i, mappers + j, f"e{i}-{j}")
                      for i in range(mappers) for j in range(reducers))
        return cls(stages, edges)


@dataclass(frozen=True)
class Partition:
    edge: str
    pages: tuple
    byte_len: int
    checksum: str


@dataclass
class EdgeMetrics:
    edge: str
    mode: str
    started: int = 0
    completed: int = 0
    interconnect_rtts: int = 0
    tor_rtts: int = 0
    tor_payload_bytes: int = 0

    @property
    def duration_us(self) -> float:
        return to_us(self.completed - self.started)


@dataclass(frozen=True)
class DataMsg:
    edge: str
    data: bytes


@dataclass(frozen=True)
class XferDone:
    edge: str


@dataclass(frozen=True)
class EdgeComplete:
    edge: str


class ShuffleNode(Process):
    """Producer and/or consumer of partitions for one shuffle stage."""

    def __init__(self, pid, os, job):
        super().__init__(pid, os)
        self.job = job
        self.out_edges: dict[str, tuple[Partition, int]] = {}  # edge -> (partition, consumer pid)
        self.landing: dict[str, list[int]] = {}                # edge -> my pages (transparent)
        self.incoming_grants: dict[tuple, str] = {}            # (src, vaddrs) -> edge
        self.signal_handlers["page-added"] = self._on_page_added
        self.signal_handlers["memory-fault"] = self._on_fault

    def on_timer(self, name, data):
        if name == "start-edges":
            # per-task compute happens first; transfers begin when it ends
            for edge in sorted(self.out_edges):
                self._start_edge(edge)

    def _on_fault(self, sig):
        self.job.note_failed(self.pid, sig.detail.get("error", "fault"),
                             sig.detail.get("element"))

    def _start_edge(self, edge: str) -> None:
        partition, consumer = self.out_edges[edge]
        metrics = self.job.edges[edge]
        metrics.started = self.os.sim.now
        if self.job.mode == "grant":
            self.os.sys_grant(self.pid, list(partition.pages), consumer, None)
        else:
            def have_data(data):
                metrics.interconnect_rtts += 1
                self.os.send_to_process(self.pid, consumer, DataMsg(edge, data),
                                        payload_bytes=len(data))
            self.os.read(self.pid, partition.pages[0], partition.byte_len,
                         have_data, ctx=f"xfer-read:{edge}")

    def on_message(self, payload, src_pid):
        if isinstance(payload, DataMsg):
            metrics = self.job.edges[payload.edge]
            pages = self.landing[payload.edge]

            def stored(_ok, edge=payload.edge):
                metrics.interconnect_rtts += 1
                self.os.send_to_process(self.pid, src_pid, XferDone(edge))
                self.job.note_consumed(edge, self.pid, pages)

            self.os.write(self.pid, pages[0], payload.data, stored,
                          ctx=f"xfer-write:{payload.edge}")
        elif isinstance(payload, XferDone):
            metrics = self.job.edges[payload.edge]
            metrics.tor_rtts += 1
            metrics.tor_payload_bytes += self.out_edges[payload.edge][0].byte_len
            self.job.note_complete(payload.edge, self.os.sim.now)

    def _on_page_added(self, sig):
        key = (sig.detail["src"], tuple(sorted(sig.detail["vaddrs"])))
        edge = self.incoming_grants.get(key)
        if edge is None:
            return
        # the whole grant was one control round trip on the interconnect
        self.job.edges[edge].interconnect_rtts += 1
        self.job.note_consumed(edge, self.pid, sorted(sig.detail["vaddrs"]))
        self.job.note_complete(edge, self.os.sim.now)


class TransferJob:
    """One stage of partition transfers plus its accounting."""

    def __init__(self, cluster: Cluster, mappers: int, reducers: int,
                 partition_pages: int, mode: str, seed: int,
                 task_compute_us: float = 0.0):
        self.cluster = cluster
        self.mode = mode
        self.edges: dict[str, EdgeMetrics] = {}
        self.consumed: dict[str, tuple[int, list[int]]] = {}  # edge -> (pid, vaddrs)
        self.done_edges: set[str] = set()
        self.partitions: dict[str, Partition] = {}
        self.done = False
        self.failure: Optional[dict] = None
        rng = random.Random(f"shuffle:{seed}")
        page_size = cluster.addressing.page_size
        self.graph = TaskGraph.bipartite(mappers, reducers)
        nodes = [cluster.spawn(0, lambda pid, os: ShuffleNode(pid, os, self),
                               element_id=f"r0.c{n}")
                 for n in (*self.graph.stages[0], *self.graph.stages[1])]
        self.producers = nodes[:mappers]
        self.consumers = nodes[mappers:]
        mmu = cluster.racks[0].mmu
        for producer_idx, consumer_idx, edge in self.graph.edges:
            producer = nodes[producer_idx]
            consumer = nodes[consumer_idx]
            pages = mmu.allocate(producer.pid, partition_pages)
            content = rng.randbytes(partition_pages * page_size)
            self._preload(pages, content)
            partition = Partition(edge, tuple(pages),
                                  partition_pages * page_size,
                                  hashlib.sha256(content).hexdigest())
            self.partitions[edge] = partition
            producer.out_edges[edge] = (partition, consumer.pid)
            self.edges[edge] = EdgeMetrics(edge, mode)
            if mode == "transparent":
                consumer.landing[edge] = mmu.allocate(consumer.pid,
                                                      partition_pages)
            else:
                consumer.incoming_grants[
                    (producer.pid,
                     tuple(sorted(cluster.addressing.page_base(v)
                                  for v in pages)))] = edge
        for producer in self.producers:
            producer.os.set_timer(producer.pid, "start-edges",
                                  us(task_compute_us))

    def _preload(self, pages, content):
        mmu = self.cluster.racks[0].mmu
        page_size = self.cluster.addressing.page_size
        for i, vaddr in enumerate(pages):
            owner = self.cluster.addressing.split(vaddr)[0]
            frame, _ = mmu.translate(owner, vaddr)
            element = self.cluster.sim.actors[frame.element]
            element.poke_frame(frame.index, 0,
                               content[i * page_size:(i + 1) * page_size])

    def note_consumed(self, edge, pid, vaddrs):
        self.consumed[edge] = (pid, list(vaddrs))

    def note_complete(self, edge, t):
        self.edges[edge].completed = t
        self.done_edges.add(edge)
        if len(self.done_edges) == len(self.edges):
            self.done = True

    def note_failed(self, pid, cause, element):
        if self.failure is None:
            self.failure = {"pid": pid, "cause": cause, "element": element,
                            "t": self.cluster.sim.now}

    # ----------------------------------------------------------------- checks

    def consumer_checksum(self, edge: str) -> str:
        """Digest of the bytes the consumer ends up owning (direct frame
        inspection, no simulated traffic)."""
        pid, vaddrs = self.consumed[edge]
        mmu = self.cluster.racks[0].mmu
        blob = b""
        for vaddr in vaddrs:
            frame, _ = mmu.translate(pid, vaddr)
            blob += self.cluster.sim.actors[frame.element].frame_bytes(frame.index)
        return hashlib.sha256(blob).hexdigest()

    def metrics(self) -> dict:
        per_edge = sorted(self.edges.values(), key=lambda m: m.edge)
        checks = all(self.consumer_checksum(e.edge) == self.partitions[e.edge].checksum
                     for e in per_edge if e.edge in self.consumed)
        return {
            "mode": self.mode,
            "edges": len(per_edge),
            "per_partition_us": per_edge[0].duration_us if per_edge else 0.0,
            "interconnect_rtts": sum(m.interconnect_rtts for m in per_edge),
            "tor_rtts": sum(m.tor_rtts for m in per_edge),
            "total_rtts": sum(m.interconnect_rtts + m.tor_rtts for m in per_edge),
            "tor_payload_bytes": sum(m.tor_payload_bytes for m in per_edge),
            "total_time_us": max((m.completed for m in per_edge if m.completed),
                                 default=0) / 1000.0,
            "checksums_match": checks,
            "job_failed": self.failure,
        }


# --------------------------------------------------------------- stragglers

META = 16  # progress u64 + reserved


class WorkTask(Process):
    """Crunches work units, persisting each unit's result and the progress
    counter in one transaction, so a thief can resume mid-job."""

    def __init__(self, pid, os, job, task_id: int, units: int, unit_time: int,
                 resume_pages=None):
        super().__init__(pid, os)
        self.job = job
        self.task_id = task_id
        self.units = units
        self.unit_time = unit_time
        self.arena = None
        self.progress = 0
        self.resume_pages = resume_pages
        self.halted = False
        self.signal_handlers["memory-fault"] = self._on_fault
        self.signal_handlers["page-added"] = self._on_page_added

    def on_start(self):
        if self.resume_pages is not None:
            return  # wait for the pages to arrive
        def allocated(rep):
            if not rep.ok:
                return
            arena = Arena(self.os.cluster.addressing, rep.value, log_pages=1)
            def formatted(_):
                slots = arena.alloc(META + 8 * self.units)
                self.result_base = slots + META
                self.progress_addr = slots
                self.os.start_op(self.pid,
                                 arena.op_tx([], roots=[("progress", slots)]),
                                 lambda _: self._arena_ready(arena))
            self.os.start_op(self.pid, arena.op_format(), formatted)
        self.os.sys_allocate(self.pid, 4, True, allocated)

    def _arena_ready(self, arena):
        self.arena = arena
        self.job.note_task_started(self.task_id, self.pid, self.os.sim.now)
        self._schedule_unit()

    def _on_page_added(self, sig):
        if self.resume_pages is None or self.arena is not None:
            return
        def recovered(result):
            status, arena = result
            if status != "ok":
                self.job.note_task_failed(self.task_id, status)
                return
            self.progress_addr = arena.get_root("progress")
            self.result_base = self.progress_addr + META
            def got_progress(raw):
                self.progress = int.from_bytes(raw, "little")
                self.arena = arena
                self.job.note_task_resumed(self.task_id, self.pid,
                                           self.progress, self.os.sim.now)
                self._schedule_unit()
            self.os.read(self.pid, self.progress_addr, 8, got_progress,
                         ctx="resume-progress")
        self.os.start_op(self.pid, op_recover(self.os.cluster.addressing,
                                              list(sig.detail["vaddrs"])),
                         recovered)

    def _schedule_unit(self):
        if self.halted:
            return
        if self.progress >= self.units:
            self.job.note_task_done(self.task_id, self.pid, self.os.sim.now)
            return
        self.os.set_timer(self.pid, "unit", self.unit_time, self.progress)

    def on_timer(self, name, unit):
        if name != "unit" or self.halted or self.arena is None:
            return
        # the work itself happens now; persistence follows
        self.os.sim.trace_record(self.os.element_id, "unit-exec",
                                 task=self.task_id, unit=unit, pid=self.pid)
        result = ((self.task_id + 1) * 1_000_003 + unit).to_bytes(8, "little")
        writes = [(self.result_base + 8 * unit, result),
                  (self.progress_addr, (unit + 1).to_bytes(8, "little"))]
        def committed(_):
            self.progress = unit + 1
            self.job.note_unit_done(self.task_id, self.pid, unit,
                                    self.os.sim.now)
            self._schedule_unit()
        self.os.start_op(self.pid, self.arena.op_tx(writes), committed)

    def _on_fault(self, sig):
        # pages were stolen out from under us (or memory died): stop
        self.halted = True
        self.job.note_task_fenced(self.task_id, self.pid, self.os.sim.now)

    def on_message(self, payload, src_pid):
        if payload == "kill":
            self.halted = True
            self.os.cancel_timer(self.pid, "unit")
            self.job.note_task_killed(self.task_id, self.pid, self.os.sim.now)


class StragglerJob:
    """Runs n tasks, detects the straggler, recovers by steal or restart."""

    def __init__(self, cluster: Cluster, n_tasks: int, units: int,
                 unit_time_us: float, straggler_factor: float,
                 recovery: str, slack: float = 2.0,
                 crash_straggler_compute_at_us: float | None = None):
        self.cluster = cluster
        self.recovery = recovery
        self.units = units
        self.unit_time = us(unit_time_us)
        self.slack = slack
        self.done = False
        self.unit_exec: list[tuple[int, int, int]] = []   # (task, unit, pid)
        self.task_done_at: dict[int, int] = {}
        self.task_started: dict[int, int] = {}
        self.task_pid: dict[int, int] = {}
        self.resumed_from: dict[int, int] = {}
        self.relaunch_started_at: dict[int, int] = {}
        self.handled: set[int] = set()
        self.events: list[str] = []
        self.tasks = []
        for t in range(n_tasks):
            slow = straggler_factor if t == 0 else 1.0
            task = cluster.spawn(
                0, lambda pid, os, t=t, slow=slow: WorkTask(
                    pid, os, self, t, units, us(unit_time_us * slow)),
                element_id=f"r0.c{t + 1}")
            self.tasks.append(task)
        self.orch = cluster.spawn(0, self._make_orch, element_id="r0.c0")
        cluster.register_group({self.orch.pid} | {t.pid for t in self.tasks})
        cluster.register_factory("resume-task", self._resume_factory)
        if crash_straggler_compute_at_us is not None:
            element = self.tasks[0].os.element_id
            mon = cluster.racks[0].monitor
            if mon is not None:
                mon.register_notify_group(self.tasks[0].pid, {self.orch.pid})
            class _Driver:
                element_id = "straggler-driver"
                rack = 0
                def on_event(self, fn):
                    fn()
            driver = _Driver()
            cluster.sim.add_actor(driver)
            cluster.sim.schedule("straggler-driver",
                                 lambda: cluster.crash_compute(element),
                                 extra_delay=us(crash_straggler_compute_at_us))

    def _resume_factory(self, cluster, pid, os, params):
        return WorkTask(pid, os, self, params["task"], self.units,
                        self.unit_time, resume_pages=True)

    def _make_orch(self, pid, os):
        job = self

        class Orchestrator(Process):
            def __init__(self):
                super().__init__(pid, os)
                self.signal_handlers["group-failure-notice"] = self._on_notice
                self.signal_handlers["page-added"] = self._on_stolen_pages
                self._pending_grant = None

            def on_start(self):
                self.os.set_timer(pid, "check", us(10))

            def on_timer(self, name, data):
                if name != "check" or job.done:
                    return
                job.check_stragglers(self)
                self.os.set_timer(pid, "check", us(10))

            def _on_notice(self, sig):
                task = next((t for t, p in job.task_pid.items()
                             if job.cluster.process_info(p) is not None
                             and job.cluster.process_info(p).element_id == sig.detail["element"]),
                            None)
                if task is not None:
                    job.recover_task(self, task)

            def _on_stolen_pages(self, sig):
                if self._pending_grant is None:
                    return
                new_pid, task = self._pending_grant
                self._pending_grant = None
                vaddrs = list(sig.detail["vaddrs"])
                self.os.sys_grant(pid, vaddrs, new_pid, lambda rep: None)

        return Orchestrator()

    # ------------------------------------------------------------ accounting

    def note_task_started(self, task, pid, t):
        self.task_started.setdefault(task, t)
        self.task_pid[task] = pid

    def note_unit_done(self, task, pid, unit, t):
        pass

    def note_task_done(self, task, pid, t):
        self.task_done_at[task] = t
        if len(self.task_done_at) == len(self.tasks):
            self.done = True

    def note_task_resumed(self, task, pid, progress, t):
        self.resumed_from[task] = progress
        self.task_pid[task] = pid

    def note_task_fenced(self, task, pid, t):
        self.events.append(f"fenced:{task}")

    def note_task_killed(self, task, pid, t):
        self.events.append(f"killed:{task}")

    def note_task_failed(self, task, status):
        self.events.append(f"failed:{task}:{status}")

    # ------------------------------------------------------------- recovery

    def check_stragglers(self, orch):
        finished = sorted(t for t, done in self.task_done_at.items())
        if len(finished) < max(1, len(self.tasks) // 2):
            return
        durations = sorted(self.task_done_at[t] - self.task_started[t]
                           for t in finished)
        median = durations[len(durations) // 2]
        now = self.cluster.sim.now
        for task in range(len(self.tasks)):
            if task in self.task_done_at or task in self.handled:
                continue
            started = self.task_started.get(task)
            if started is None:
                continue
            if now - started > self.slack * median:
                self.recover_task(orch, task)

    def recover_task(self, orch, task):
        if task in self.handled or task in self.task_done_at:
            return
        self.handled.add(task)
        self.relaunch_started_at[task] = self.cluster.sim.now
        victim = self.task_pid[task]
        if self.recovery == "steal":
            def provisioned(rep):
                if not rep.ok:
                    return
                new_pid = rep.value
                orch._pending_grant = (new_pid, task)
                orch.os.sys_steal(orch.pid, victim, "all", lambda r: None)
            orch.os.sys_provision(orch.pid, {"kind": "resume-task",
                                             "params": {"task": task}},
                                  on_done=provisioned)
        else:  # restart from scratch
            orch.os.send_to_process(orch.pid, victim, "kill")
            def provisioned(rep):
                pass
            self.cluster.register_factory(
                "restart-task",
                lambda cl, pid, os, params: WorkTask(pid, os, self,
                                                     params["task"], self.units,
                                                     self.unit_time))
            orch.os.sys_provision(orch.pid, {"kind": "restart-task",
                                             "params": {"task": task}},
                                  on_done=provisioned)

    # --------------------------------------------------------------- metrics

    def metrics(self) -> dict:
        execs = self.cluster.sim.trace.by_kind("unit-exec")
        per_unit: dict[tuple[int, int], int] = {}
        for rec in execs:
            per_unit[(rec["task"], rec["unit"])] = per_unit.get(
                (rec["task"], rec["unit"]), 0) + 1
        reexecuted = sum(n - 1 for n in per_unit.values())
        completed = {t: self.task_done_at.get(t) for t in range(len(self.tasks))}
        distinct = len(per_unit)
        return {
            "recovery": self.recovery,
            "reexecuted_units": reexecuted,
            "distinct_units": distinct,
            "expected_units": self.units * len(self.tasks),
            "all_done": self.done,
            "resumed_from": dict(self.resumed_from),
            "relaunch_started_us": {t: to_us(v) for t, v in
                                    self.relaunch_started_at.items()},
            "total_time_us": to_us(max(self.task_done_at.values()))
            if self.done else None,
        }
