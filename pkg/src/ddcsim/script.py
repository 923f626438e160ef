"""Randomized primitive-op scripts: the grant/steal/fail fuzz workload.

A script is a seeded sequence of timed operations (allocate, read, write,
grant, steal, revoke, crashes, memory failures) over a handful of processes.
Scripts drive the full syscall surface; the invariant monitor judges the run.
Faults are expected mid-script (beliefs about ownership go stale the moment a
steal lands), so script processes handle memory faults and keep going.
"""

from __future__ import annotations

import random

from .cluster import Cluster
from .computeos import Process
from .invariants import InvariantMonitor
from .units import us


class ScriptProcess(Process):
    """Executes scripted ops delivered as timers; tracks believed ownership."""

    def __init__(self, pid, os):
        super().__init__(pid, os)
        self.pages: list[int] = []
        self.faults = 0
        self.signal_handlers["memory-fault"] = self._on_fault
        self.signal_handlers["page-added"] = self._on_added

    def _on_fault(self, sig):
        self.faults += 1

    def _on_added(self, sig):
        self.pages.extend(sig.detail["vaddrs"])

    def on_timer(self, name, op):
        if not name.startswith("op"):
            return
        kind = op["kind"]
        if kind == "allocate":
            def done(rep):
                if rep.ok:
                    self.pages.extend(rep.value)
            self.os.sys_allocate(self.pid, op["n"], op["allow_steal"], done)
        elif kind == "write" and self.pages:
            vaddr = self.pages[op["slot"] % len(self.pages)]
            self.os.write(self.pid, vaddr + op["offset"], op["data"])
        elif kind == "read" and self.pages:
            vaddr = self.pages[op["slot"] % len(self.pages)]
            self.os.read(self.pid, vaddr, 16, lambda d: None)
        elif kind == "grant" and self.pages:
            count = max(1, op["n"] % (len(self.pages) + 1))
            pages = self.pages[:count]
            def granted(rep, pages=pages):
                if rep.ok:
                    self.pages = [p for p in self.pages if p not in pages]
            self.os.sys_grant(self.pid, pages, op["dst"], granted)
        elif kind == "steal":
            self.os.sys_steal(self.pid, op["src"], "all", lambda rep: None)
        elif kind == "revoke" and self.pages:
            count = max(1, op["n"] % (len(self.pages) + 1))
            self.os.sys_revoke(self.pid, self.pages[:count], lambda rep: None)


def generate_script(rng: random.Random, n_procs: int, n_ops: int,
                    pages_budget: int):
    """Timed op list plus the group layout; both fully seed-determined."""
    ops = []
    t = 5.0
    allocated = 0
    kinds = ["allocate", "write", "write", "read", "grant", "steal", "revoke"]
    for i in range(n_ops):
        actor = rng.randrange(n_procs)
        kind = rng.choice(kinds)
        op = {"kind": kind}
        if kind == "allocate":
            n = rng.randint(1, 4)
            if allocated + n > pages_budget:
                kind = op["kind"] = "read"
                op["slot"] = rng.randrange(8)
            else:
                allocated += n
                op.update(n=n, allow_steal=rng.random() < 0.8)
        if kind == "write":
            op.update(slot=rng.randrange(8), offset=rng.randrange(0, 64),
                      data=rng.randbytes(rng.randint(1, 32)))
        elif kind == "read":
            op.setdefault("slot", rng.randrange(8))
        elif kind == "grant":
            op.update(n=rng.randint(1, 3),
                      dst=rng.randrange(n_procs))
        elif kind == "steal":
            op.update(src=rng.randrange(n_procs))
        elif kind == "revoke":
            op.update(n=rng.randint(1, 2))
        ops.append((t, actor, op))
        t += rng.uniform(3.0, 15.0)
    failures = []
    if rng.random() < 0.5:
        failures.append((t * rng.uniform(0.3, 0.9), "crash-compute",
                         rng.randrange(n_procs)))
    if rng.random() < 0.35:
        failures.append((t * rng.uniform(0.3, 0.9), "fail-memory",
                         rng.choice(["silent", "explicit"])))
    if rng.random() < 0.3:
        failures.append((t * rng.uniform(0.3, 0.9), "crash-process",
                         rng.randrange(n_procs)))
    n_groups = rng.randint(1, 3)
    groups = []
    for _ in range(n_groups):
        size = rng.randint(1, n_procs)
        groups.append(sorted(rng.sample(range(n_procs), size)))
    return ops, failures, groups, t + 50.0


class _FailureDriver:
    """Actor applying scheduled cluster-level failure injections."""

    def __init__(self, cluster):
        self.cluster = cluster
        self.sim = cluster.sim
        self.element_id = "script-driver"
        self.rack = 0
        self.sim.add_actor(self)

    def at(self, t_ticks, fn):
        self.sim.schedule(self.element_id, fn, extra_delay=t_ticks)

    def on_event(self, fn):
        fn()


def run_primitive_script(cluster: Cluster, rng: random.Random,
                         n_procs: int = 4, n_ops: int = 36,
                         pages_budget: int = 32, defect=None):
    """Build processes, schedule one generated script, run, finalize checks.

    Returns (summary, violations, procs)."""
    monitor = InvariantMonitor(cluster)
    if defect:
        cluster.racks[0].mmu.defect = defect
    procs = [cluster.spawn(0, lambda pid, os: ScriptProcess(pid, os))
             for _ in range(n_procs)]
    ops, failures, groups, end = generate_script(rng, n_procs, n_ops, pages_budget)
    for members in groups:
        cluster.register_group({procs[i].pid for i in members})
    for i, (t, actor, op) in enumerate(ops):
        if op["kind"] in ("grant",):
            op = dict(op, dst=procs[op["dst"]].pid)
        elif op["kind"] == "steal":
            op = dict(op, src=procs[op["src"]].pid)
        proc = procs[actor]
        proc.os.set_timer(proc.pid, f"op{i}", us(round(t, 3)), op)
    driver = _FailureDriver(cluster)
    memory_ids = [el.element_id for el in cluster.racks[0].memory]
    for t, kind, arg in failures:
        tick = us(round(t, 3))
        if kind == "crash-compute":
            element = cluster.process_info(procs[arg].pid).element_id
            driver.at(tick, lambda el=element: cluster.crash_compute(el))
        elif kind == "fail-memory":
            target = memory_ids[rng.randrange(len(memory_ids))]
            driver.at(tick, lambda el=target, m=arg: cluster.fail_memory(el, m))
        elif kind == "crash-process":
            driver.at(tick, lambda p=procs[arg].pid: cluster.crash_process(p))
    cluster.sim.run_until(us(round(end + 100, 3)))
    summary = monitor.finalize()
    return summary, monitor.violations, procs
