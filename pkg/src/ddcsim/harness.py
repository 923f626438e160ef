"""Scenario runner, fuzz loop, and crash sweep.

run() executes one scenario deterministically: any randomizable fields (fuzz
blocks, scripts, transaction lists) are resolved from the scenario seed, so
every fuzz case replays from (scenario, seed) alone. Reports are exact
functions of (scenario, seed): no wall-clock, no environment.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from .heapwork import HeapWorkload, oracle_state
from .invariants import CHECKS, InvariantMonitor
from .paxos import PaxosWorkload
from .scenario import ConfigError, build_cluster
from .script import run_primitive_script
from .shuffle import StragglerJob, TransferJob
from .units import to_us, us


@dataclass
class RunReport:
    scenario: str
    seed: int
    profile: str
    metrics: dict
    invariants: dict
    trace_path: Optional[str] = None

    @property
    def ok(self) -> bool:
        return all(v == "pass" for v in self.invariants.values())

    def to_json(self) -> str:
        payload = {"scenario": self.scenario, "seed": self.seed,
                   "profile": self.profile, "metrics": self.metrics,
                   "invariants": self.invariants}
        if self.trace_path is not None:
            payload["trace_path"] = self.trace_path
        return json.dumps(payload, sort_keys=True, indent=2, default=str)

    def text(self) -> str:
        lines = [f"scenario: {self.scenario}  seed={self.seed}  profile={self.profile}"]
        lines.append("invariants:")
        for name in sorted(self.invariants):
            lines.append(f"  {name:28s} {self.invariants[name]}")
        lines.append("metrics:")
        for key in sorted(self.metrics):
            lines.append(f"  {key}: {self.metrics[key]}")
        return "\n".join(lines)


class _Driver:
    """Actor that applies the scenario's failure schedule."""

    def __init__(self, cluster):
        self.cluster = cluster
        self.element_id = "scenario-driver"
        self.rack = 0
        cluster.sim.add_actor(self)

    def at(self, tick, fn):
        self.cluster.sim.schedule(self.element_id, fn, extra_delay=tick)

    def on_event(self, fn):
        fn()


def _schedule_failures(cluster, failures, resolve_element):
    driver = _Driver(cluster)
    for spec in failures:
        kind = spec["kind"]
        tick = us(spec.get("at_us", 0))
        if kind == "monitor-fail":
            driver.at(tick, lambda r=spec.get("rack", 0): cluster.fail_monitor(r))
            continue
        element = resolve_element(spec)
        if kind == "compute-crash":
            driver.at(tick, lambda el=element: cluster.crash_compute(el))
        elif kind == "compute-revive":
            driver.at(tick, lambda el=element: cluster.revive_compute(el))
        elif kind == "memory-fail":
            mode = spec.get("mode", "silent")
            driver.at(tick, lambda el=element, m=mode: cluster.fail_memory(el, m))
        elif kind == "process-crash":
            driver.at(tick, lambda p=spec["pid"]: cluster.crash_process(p))


# ----------------------------------------------------------------- workloads

def _run_shuffle_mode(cfg, seed, profile_name, collect, mode):
    cluster = build_cluster(cfg, seed=seed, profile_name=profile_name,
                            collect_trace=collect)
    monitor = InvariantMonitor(cluster)
    w = cfg["workload"]
    job = TransferJob(cluster, w.get("mappers", 1), w.get("reducers", 1),
                      w.get("partition_pages", 2), mode, seed,
                      task_compute_us=w.get("task_compute_us", 0.0))
    cluster.sim.run_until(lambda sim: job.done)
    if not job.done:
        cluster.sim.run_until(us(cfg.get("t_max_us", 5000)))
    summary = monitor.finalize()
    metrics = job.metrics()
    expected = {"transparent": (2, 1), "grant": (1, 0)}[mode]
    accounting_ok = all(
        (m.interconnect_rtts, m.tor_rtts) == expected for m in job.edges.values())
    summary["rtt-accounting"] = "pass" if accounting_ok and job.done else "fail"
    summary["result-equivalence"] = "pass" if metrics["checksums_match"] else "fail"
    if mode == "grant":
        summary["zero-copy"] = ("pass" if cluster.sim.tor_payload_bytes == 0
                                else "fail")
    return cluster, metrics, summary


def _run_shuffle(cfg, seed, profile_name, collect):
    mode = cfg["workload"].get("mode", "both")
    modes = ["transparent", "grant"] if mode == "both" else [mode]
    metrics = {}
    invariants = {}
    traces = []
    for m in modes:
        cluster, mm, summary = _run_shuffle_mode(cfg, seed, profile_name,
                                                 collect, m)
        metrics[m] = mm
        for name, verdict in summary.items():
            invariants[name] = ("fail" if invariants.get(name) == "fail"
                                else verdict)
        traces.append(cluster.sim.trace)
    if len(modes) == 2:
        t, g = metrics["transparent"], metrics["grant"]
        metrics["speedup"] = (t["per_partition_us"] / g["per_partition_us"]
                              if g["per_partition_us"] else None)
        same = all(k in ("speedup",) or
                   metrics["transparent"]["checksums_match"]
                   for k in metrics)
        invariants["result-equivalence"] = (
            "pass" if invariants.get("result-equivalence") == "pass" and same
            else "fail")
    return metrics, invariants, traces


def _run_straggler_mode(cfg, seed, profile_name, collect, recovery):
    cluster = build_cluster(cfg, seed=seed, profile_name=profile_name,
                            collect_trace=collect)
    monitor = InvariantMonitor(cluster)
    w = cfg["workload"]
    job = StragglerJob(cluster, w.get("tasks", 3), w.get("units", 10),
                       w.get("unit_time_us", 8.0),
                       w.get("straggler_factor", 6.0), recovery,
                       slack=w.get("slack", 2.0),
                       crash_straggler_compute_at_us=w.get("crash_straggler_at_us"))
    cluster.sim.run_until(lambda sim: job.done)
    if not job.done:
        cluster.sim.run_until(us(cfg.get("t_max_us", 20000)))
    summary = monitor.finalize()
    metrics = job.metrics()
    if recovery == "steal":
        bound_ok = job.done and metrics["reexecuted_units"] <= 1
        summary["reexecution-bound"] = "pass" if bound_ok else "fail"
    summary["job-complete"] = "pass" if job.done else "fail"
    return cluster, metrics, summary


def _run_straggler(cfg, seed, profile_name, collect):
    recovery = cfg["workload"].get("recovery", "both")
    modes = ["steal", "restart"] if recovery == "both" else [recovery]
    metrics, invariants, traces = {}, {}, []
    for m in modes:
        cluster, mm, summary = _run_straggler_mode(cfg, seed, profile_name,
                                                   collect, m)
        metrics[m] = mm
        for name, verdict in summary.items():
            invariants[name] = ("fail" if invariants.get(name) == "fail"
                                else verdict)
        traces.append(cluster.sim.trace)
    if len(modes) == 2:
        steal_re = metrics["steal"]["reexecuted_units"]
        restart_re = metrics["restart"]["reexecuted_units"]
        metrics["reexecution_saved"] = restart_re - steal_re
        invariants["steal-beats-restart"] = ("pass" if steal_re < restart_re
                                             else "fail")
    return metrics, invariants, traces


def _resolve_paxos_fuzz(w: dict, seed: int):
    """Pin the fuzz block's free choices using the run seed."""
    fuzz = w.get("fuzz")
    if not fuzz:
        return w, None
    rng = random.Random(f"paxos-fuzz:{seed}")
    resolved = dict(w)
    lo, hi = fuzz.get("commands", [2, 3])
    resolved["commands"] = rng.randint(lo, hi)
    resolved["strategy"] = rng.choice(fuzz.get("strategies",
                                               ["reincarnate", "transfer"]))
    failure = None
    kind = rng.choice(fuzz.get("failure_kinds",
                               ["compute-crash", "memory-fail", "none"]))
    if kind != "none":
        lo_t, hi_t = fuzz.get("failure_window_us", [100, 400])
        failure = {"kind": kind, "at_us": round(rng.uniform(lo_t, hi_t), 3),
                   "member_index": rng.randrange(3)}
        if kind == "memory-fail":
            failure["mode"] = rng.choice(["silent", "explicit"])
    return resolved, failure


def _run_paxos_strategy(cfg, seed, profile_name, collect, w, failures):
    cluster = build_cluster(cfg, seed=seed, profile_name=profile_name,
                            collect_trace=collect)
    monitor = InvariantMonitor(cluster)
    liveness = w.get("liveness_write_every_us")
    workload = PaxosWorkload(
        cluster, n_replicas=w.get("replicas", 3),
        n_commands=w.get("commands", 3), strategy=w["strategy"],
        liveness_write_every=us(liveness) if liveness else None,
        suspicion_timeout=us(w["suspicion_timeout_us"])
        if "suspicion_timeout_us" in w else None)

    def resolve(spec):
        if "element" in spec:
            return spec["element"]
        member = workload.bootstrap_members[spec.get("member_index", 0)]
        info = cluster.process_info(member)
        if spec["kind"] == "memory-fail":
            return f"r{info.rack}.m0"
        return info.element_id
    _schedule_failures(cluster, failures, resolve)
    last_failure = max((us(f.get("at_us", 0)) for f in failures), default=0)
    settle = last_failure + us(w.get("settle_us", 800))

    def finished(sim):
        return workload.client_done and sim.now >= settle
    cluster.sim.run_until(finished)
    if not workload.client_done:
        cluster.sim.run_until(us(cfg.get("t_max_us", 8000)))
    summary = monitor.finalize()
    metrics = workload.metrics()
    metrics["suspicion_timeout_us"] = to_us(workload.suspicion_timeout)
    metrics["client_done"] = workload.client_done
    metrics["detections"] = [
        {"element": r["element"], "t_us": to_us(r["t"])}
        for r in cluster.sim.trace.by_kind("detect")]
    metrics["crash_times_us"] = [f.get("at_us") for f in failures
                                 if f["kind"] == "compute-crash"]
    if failures:
        t0 = us(failures[0].get("at_us", 0))
        nxt = workload.first_chosen_after(t0)
        metrics["time_to_next_chosen_us"] = (to_us(nxt - t0)
                                             if nxt is not None else None)
    violations = metrics.pop("agreement_violations")
    summary["agreement"] = "pass" if not any(
        v["check"] == "agreement" for v in violations) else "fail"
    summary["applied-prefix"] = "pass" if not any(
        v["check"] == "applied-prefix" for v in violations) else "fail"
    summary["liveness"] = "pass" if workload.client_done else "fail"
    metrics["violation_details"] = violations
    return cluster, metrics, summary


def _run_paxos(cfg, seed, profile_name, collect):
    w, fuzz_failure = _resolve_paxos_fuzz(cfg["workload"], seed)
    failures = list(cfg.get("failures", []))
    if fuzz_failure is not None:
        failures.append(fuzz_failure)
    strategy = w.get("strategy", "reincarnate")
    strategies = (["reincarnate", "transfer"] if strategy == "both"
                  else [strategy])
    metrics, invariants, traces = {}, {}, []
    for s in strategies:
        ws = dict(w, strategy=s)
        cluster, mm, summary = _run_paxos_strategy(cfg, seed, profile_name,
                                                   collect, ws, failures)
        metrics[s] = mm
        for name, verdict in summary.items():
            invariants[name] = ("fail" if invariants.get(name) == "fail"
                                else verdict)
        traces.append(cluster.sim.trace)
    if len(strategies) == 2:
        r, t = metrics["reincarnate"], metrics["transfer"]
        metrics["comparison"] = {
            "reincarnate_next_chosen_us": r.get("time_to_next_chosen_us"),
            "transfer_next_chosen_us": t.get("time_to_next_chosen_us"),
            "reincarnate_state_transfer_tor_bytes": r["snapshot_tor_bytes"],
            "transfer_state_transfer_tor_bytes": t["snapshot_tor_bytes"],
            "reincarnate_epochs": r["epochs"],
            "transfer_epochs": t["epochs"],
        }
        faster = (r.get("time_to_next_chosen_us") is not None
                  and t.get("time_to_next_chosen_us") is not None
                  and r["time_to_next_chosen_us"] < t["time_to_next_chosen_us"])
        invariants["reincarnation-faster"] = "pass" if faster else "fail"
        epoch_ok = (set(r["epochs"].values()) == {1}
                    and r["snapshot_tor_bytes"] == 0)
        invariants["reincarnation-transparent"] = "pass" if epoch_ok else "fail"
    return metrics, invariants, traces


def _run_primitive(cfg, seed, profile_name, collect):
    cluster = build_cluster(cfg, seed=seed, profile_name=profile_name,
                            collect_trace=collect)
    w = cfg["workload"]
    rng = random.Random(f"script:{seed}")
    summary, violations, _procs = run_primitive_script(
        cluster, rng, n_procs=w.get("processes", 4), n_ops=w.get("ops", 36),
        pages_budget=w.get("pages", 32), defect=cfg.get("defect"))
    metrics = {"ops": w.get("ops", 36), "violations": violations[:10],
               "events": cluster.sim.events_dispatched}
    return metrics, summary, [cluster.sim.trace]


def _run_ccheap(cfg, seed, profile_name, collect, crash_at_event=None):
    cluster = build_cluster(cfg, seed=seed, profile_name=profile_name,
                            collect_trace=collect)
    monitor = InvariantMonitor(cluster)
    w = cfg["workload"]
    workload = HeapWorkload(cluster, w.get("transactions", 50), seed,
                            defect=cfg.get("defect"),
                            writes_per_tx=w.get("writes_per_tx", (1, 2)))
    if crash_at_event is not None:
        worker_element = cluster.process_info(workload.worker.pid).element_id
        def maybe_crash(index):
            if index == crash_at_event:
                cluster.crash_compute(worker_element)
        cluster.sim.after_event = maybe_crash
        cluster.sim.run_until(
            lambda sim: workload.recovery_status is not None)
        if workload.recovery_status is None:
            cluster.sim.run_until(us(cfg.get("t_max_us", 20000)))
    else:
        cluster.sim.run_until(
            lambda sim: workload.worker_done_at_event is not None)
        if workload.worker_done_at_event is None:
            cluster.sim.run_until(us(cfg.get("t_max_us", 20000)))
    return cluster, workload, monitor


def run(cfg: dict, seed: Optional[int] = None,
        profile_name: Optional[str] = None, trace_out: Optional[str] = None,
        collect_trace: Optional[bool] = None) -> RunReport:
    seed = cfg.get("seed", 0) if seed is None else seed
    profile_used = profile_name or cfg.get("profile", "current")
    collect = collect_trace if collect_trace is not None else True
    kind = cfg["workload"]["kind"]
    if kind == "shuffle":
        metrics, invariants, traces = _run_shuffle(cfg, seed, profile_used, collect)
    elif kind == "shuffle-straggler":
        metrics, invariants, traces = _run_straggler(cfg, seed, profile_used, collect)
    elif kind == "paxos":
        metrics, invariants, traces = _run_paxos(cfg, seed, profile_used, collect)
    elif kind == "primitive-script":
        metrics, invariants, traces = _run_primitive(cfg, seed, profile_used, collect)
    elif kind == "ccheap":
        cluster, workload, monitor = _run_ccheap(cfg, seed, profile_used, collect)
        invariants = monitor.finalize()
        final = None
        if workload.worker_done_at_event is not None:
            from .heapwork import read_state_direct
            final = read_state_direct(cluster, workload.worker)
        ok = final == oracle_state(workload.txs, len(workload.txs))
        invariants["final-state"] = "pass" if ok else "fail"
        metrics = {"transactions": len(workload.txs),
                   "committed_markers": workload.marker_count,
                   "events": cluster.sim.events_dispatched}
        traces = [cluster.sim.trace]
    else:
        raise ConfigError("workload.kind", f"unhandled kind {kind!r}")
    trace_path = None
    if trace_out:
        with open(trace_out, "w") as fh:
            for trace in traces:
                fh.write(trace.to_jsonl())
        trace_path = trace_out
    return RunReport(cfg["name"], seed, profile_used, metrics, invariants,
                     trace_path)


# --------------------------------------------------------------------- fuzz

def derive_seed(base: int, index: int) -> int:
    return (base * 1_000_003 + index * 7_919 + 1) & 0x7FFFFFFF


def fuzz(cfg: dict, n_seeds: int, base_seed: Optional[int] = None) -> dict:
    base = cfg.get("seed", 0) if base_seed is None else base_seed
    failures = []
    checked = {}
    for i in range(n_seeds):
        seed = derive_seed(base, i)
        report = run(cfg, seed=seed, collect_trace=False)
        for name, verdict in report.invariants.items():
            checked[name] = checked.get(name, 0) + 1
            if verdict != "pass":
                failures.append({"seed": seed, "check": name})
    return {
        "scenario": cfg["name"],
        "seeds": n_seeds,
        "base_seed": base,
        "checks_evaluated": checked,
        "violations": failures,
        "ok": not failures,
    }


# -------------------------------------------------------------- crash sweep

def crash_sweep(cfg: dict, seed: Optional[int] = None,
                stride: int = 1) -> dict:
    if cfg["workload"]["kind"] != "ccheap":
        raise ConfigError("workload.kind",
                          "crash-sweep requires a ccheap workload")
    seed = cfg.get("seed", 0) if seed is None else seed
    baseline_cluster, baseline, _monitor = _run_ccheap(cfg, seed, None, False)
    if baseline.worker_done_at_event is None:
        raise RuntimeError("baseline heap run did not complete")
    start = baseline.setup_done_at_event + 1
    end = baseline.worker_done_at_event
    divergences = []
    points = 0
    for crash_at in range(start, end + 1, stride):
        points += 1
        cluster, workload, _mon = _run_ccheap(cfg, seed, None, False,
                                              crash_at_event=crash_at)
        expected = workload.expected_state()
        if workload.recovery_status != "ok":
            divergences.append({"crash_at_event": crash_at,
                                "problem": workload.recovery_status or "no-recovery"})
        elif workload.recovered_state != expected:
            diff = [k for k in expected
                    if workload.recovered_state.get(k) != expected[k]]
            divergences.append({"crash_at_event": crash_at,
                                "problem": "state-divergence", "keys": diff,
                                "committed": workload.committed})
    return {
        "scenario": cfg["name"],
        "seed": seed,
        "transactions": len(baseline.txs),
        "crash_points": points,
        "divergences": divergences[:20],
        "n_divergences": len(divergences),
        "invariants": {"crash-recovery-prefix":
                       "pass" if not divergences else "fail"},
        "ok": not divergences,
    }
