"""Transactional heap workload for the crash sweep.

One process runs a seeded list of transactions against an arena; the rack
monitor's fast failure handler reincarnates the arena into a recoverer
process that reports the post-recovery state. The sweep harness crashes the
worker's compute element at every event index and compares the recovered
state against a dict replay of the committed transaction prefix.
"""

from __future__ import annotations

import random

from .ccheap import Arena, op_recover
from .cluster import Cluster
from .computeos import Process
from .monitor import FastFailureHandler

KEYS = tuple(f"k{i}" for i in range(8))
VAL = 16


def generate_txs(rng: random.Random, n_tx: int,
                 writes_per_tx=(1, 2)) -> list[list[tuple[str, bytes]]]:
    txs = []
    for _ in range(n_tx):
        writes = [(rng.choice(KEYS), rng.randbytes(rng.randint(1, VAL)))
                  for _ in range(rng.randint(*writes_per_tx))]
        txs.append(writes)
    return txs


def oracle_state(txs, committed: int) -> dict[str, bytes]:
    """Sequential oracle: plain dict replay of the committed prefix."""
    state = {k: b"\0" * VAL for k in KEYS}
    for writes in txs[:committed]:
        for key, value in writes:
            state[key] = value.ljust(VAL, b"\0")
    return state


class HeapWorker(Process):
    def __init__(self, pid, os, workload):
        super().__init__(pid, os)
        self.workload = workload
        self.arena = None
        self.addrs = {}
        self.signal_handlers["memory-fault"] = lambda sig: None

    def on_start(self):
        def allocated(rep):
            if not rep.ok:
                return
            arena = Arena(self.os.cluster.addressing, rep.value, log_pages=1)
            def formatted(_):
                self.addrs = {k: arena.alloc(VAL) for k in KEYS}
                roots = sorted(self.addrs.items())
                self.os.start_op(self.pid, arena.op_tx([], roots=roots),
                                 lambda _: self._ready(arena))
            self.os.start_op(self.pid, arena.op_format(), formatted)
        self.os.sys_allocate(self.pid, 4, True, allocated)

    def _ready(self, arena):
        self.arena = arena
        self.workload.note_setup_done()
        self._next_tx(0)

    def _next_tx(self, index):
        if index >= len(self.workload.txs):
            self.workload.note_worker_done()
            return
        writes = [(self.addrs[k], v.ljust(VAL, b"\0"))
                  for k, v in self.workload.txs[index]]
        self.os.start_op(self.pid, self.arena.op_tx(writes),
                         lambda _: self._next_tx(index + 1))


class HeapRecoverer(Process):
    def __init__(self, pid, os, workload):
        super().__init__(pid, os)
        self.workload = workload
        self.signal_handlers["page-added"] = self._on_pages
        self.signal_handlers["memory-fault"] = lambda sig: None

    def _on_pages(self, sig):
        def recovered(result):
            status, arena = result
            if status != "ok":
                self.workload.note_recovered(None, status)
                return
            try:
                ranges = [(arena.get_root(k), VAL) for k in KEYS]
            except Exception:
                self.workload.note_recovered(None, "missing-roots")
                return
            def got(raw):
                state = {k: raw[i * VAL:(i + 1) * VAL]
                         for i, k in enumerate(KEYS)}
                self.workload.note_recovered(state, "ok")
            def reader():
                data = yield ("r", tuple(ranges), None, "sweep-readback")
                return data
            self.os.start_op(self.pid, reader(), got)
        self.os.start_op(self.pid, op_recover(self.os.cluster.addressing,
                                              list(sig.detail["vaddrs"])),
                         recovered)


class HeapWorkload:
    """Wires the worker, its failure handler, and the accounting together."""

    def __init__(self, cluster: Cluster, n_tx: int, seed, defect=None,
                 writes_per_tx=(1, 2)):
        self.cluster = cluster
        self.txs = generate_txs(random.Random(f"heap:{seed}"), n_tx,
                                tuple(writes_per_tx))
        self.defect = defect
        self.setup_done_at_event = None
        self.worker_done_at_event = None
        self.recovered_state = None
        self.recovery_status = None
        self.marker_count = 0
        cluster.sim.trace.subscribe(["mem-access"], self._on_access)
        cluster.register_factory(
            "heap-recoverer", lambda cl, pid, os, params: HeapRecoverer(pid, os, self))
        self.worker = cluster.spawn(0, self._make_worker, element_id="r0.c0")
        monitor = cluster.racks[0].monitor
        if monitor is not None:
            monitor.register_handler(self.worker.pid, FastFailureHandler(
                self.worker.pid, (("provision", {"kind": "heap-recoverer"}),
                                  ("steal-to-provisioned", None))))

    def _make_worker(self, pid, os):
        worker = HeapWorker(pid, os, self)
        return worker

    def _on_access(self, rec):
        if rec.get("ctx") == "tx-marker":
            self.marker_count += 1

    def note_setup_done(self):
        self.setup_done_at_event = self.cluster.sim.events_dispatched
        if self.defect:
            # applied after setup so the oracle's committed count stays aligned
            self.worker.arena.defect = self.defect

    def note_worker_done(self):
        self.worker_done_at_event = self.cluster.sim.events_dispatched

    def note_recovered(self, state, status):
        self.recovered_state = state
        self.recovery_status = status

    @property
    def committed(self) -> int:
        # one setup transaction precedes the workload transactions
        return max(0, self.marker_count - 1)

    def expected_state(self) -> dict[str, bytes]:
        return oracle_state(self.txs, self.committed)


def read_state_direct(cluster: Cluster, worker: HeapWorker) -> dict[str, bytes]:
    """Inspect the key slots straight from the frames (no simulated traffic)."""
    mmu = cluster.racks[0].mmu
    addressing = cluster.addressing
    out = {}
    for key in KEYS:
        vaddr = worker.addrs[key]
        owner = worker.pid
        frame, _ = mmu.translate(owner, vaddr)
        element = cluster.sim.actors[frame.element]
        off = addressing.offset(vaddr)
        out[key] = element.frame_bytes(frame.index)[off:off + VAL]
    return out
