"""Acceptance suite: every criterion at its stated tolerance and budget.

Each test prints one PASS line with its measured runtime; a failed assert is
the corresponding FAIL.
"""

import time

import pytest

from ddcsim import harness, scenario
from ddcsim.cluster import Cluster
from ddcsim.computeos import Process
from ddcsim.latency import LinkClass, profile
from ddcsim.units import us


def _timed(budget_s):
    class Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, *exc):
            self.elapsed = time.perf_counter() - self.t0
            if exc[0] is None:
                assert self.elapsed < budget_s, (
                    f"runtime {self.elapsed:.2f}s exceeds {budget_s}s budget")
            return False
    return Timer()


def _report(n, name, timer):
    print(f"ACCEPTANCE {n} {name}: PASS ({timer.elapsed:.2f}s)")


def test_criterion_1_three_rtt_vs_one_rtt():
    """Transparent transfer = 6us (3 RTTs), grant = 2us (1 RTT), speedup
    exactly 3.0, deterministic, zero tolerance."""
    with _timed(1.0) as t:
        cfg = scenario.load_bundled("shuffle_3rtt_vs_grant")
        report = harness.run(cfg)
        m = report.metrics
        assert m["transparent"]["per_partition_us"] == 6.0
        assert m["grant"]["per_partition_us"] == 2.0
        assert m["speedup"] == 3.0
        assert m["transparent"]["total_rtts"] == 3
        assert m["grant"]["total_rtts"] == 1
        assert report.ok
    _report(1, "3-RTT vs 1-RTT transfer", t)


def test_criterion_2_latency_table():
    """rtt() reproduces the published round-trip table exactly."""
    with _timed(1.0) as t:
        assert profile("cloud").rtt(LinkClass.CROSS_RACK_TOR) == us(45)
        assert profile("current").rtt(LinkClass.INTRA_RACK_TOR) == us(2)
        assert profile("future").rtt(LinkClass.INTRA_RACK_TOR) == us(1)
        assert profile("future").rtt(LinkClass.RACK_MMU_INTERCONNECT) == us(1)
    _report(2, "latency table reproduction", t)


def test_criterion_3_paxos_safety_fuzz():
    """>=1000 fuzzed runs (compute/memory failures, jittered delays, both
    recovery strategies): zero agreement violations, zero post-fence
    mutations."""
    with _timed(120.0) as t:
        cfg = scenario.load_bundled("paxos_fuzz")
        result = harness.fuzz(cfg, 1000)
        assert result["checks_evaluated"]["agreement"] == 1000
        assert result["checks_evaluated"]["fence-soundness"] == 1000
        agreement_fails = [v for v in result["violations"]
                           if v["check"] in ("agreement", "applied-prefix",
                                             "fence-soundness")]
        assert agreement_fails == [], agreement_fails
        assert result["ok"], result["violations"][:5]
    _report(3, "paxos safety under adversity (1000 seeds)", t)


def test_criterion_4_reincarnation_advantage():
    """Paired runs on one failure schedule: reincarnation strictly faster to
    the next chosen command, zero ToR state bytes, epoch unchanged."""
    with _timed(5.0) as t:
        cfg = scenario.load_bundled("paxos_reincarnate_vs_transfer")
        report = harness.run(cfg)
        cmp = report.metrics["comparison"]
        assert cmp["reincarnate_next_chosen_us"] is not None
        assert cmp["transfer_next_chosen_us"] is not None
        assert (cmp["reincarnate_next_chosen_us"]
                < cmp["transfer_next_chosen_us"])
        assert cmp["reincarnate_state_transfer_tor_bytes"] == 0
        assert set(cmp["reincarnate_epochs"].values()) == {1}
        assert report.invariants["agreement"] == "pass"
        assert report.ok
    _report(4, "reincarnation advantage", t)


class _Idle(Process):
    pass


def test_criterion_5_early_failure_detection():
    """Cloud profile, default monitor config: detection always beats the
    135us end-to-end timeout; memory-failure notices beat it by >100us."""
    with _timed(5.0) as t:
        timeout_ticks = us(135)
        for crash_at in (5.0, 10.0, 17.0, 50.0, 133.0):
            cluster = Cluster(profile("cloud"), seed=0)
            cluster.add_rack(2, 1, 4)
            cluster.spawn(0, lambda pid, os: _Idle(pid, os),
                          element_id="r0.c0")
            class Driver:
                element_id = "drv"
                rack = 0
                def on_event(self, fn):
                    fn()
            cluster.sim.add_actor(Driver())
            cluster.sim.schedule(
                "drv", lambda c=cluster: c.crash_compute("r0.c0"),
                extra_delay=us(crash_at))
            cluster.sim.run_until(us(400))
            det = cluster.sim.trace.by_kind("detect")
            assert len(det) == 1
            latency = det[0]["t"] - us(crash_at)
            assert latency < timeout_ticks, (
                f"detection took {latency} ticks at crash_at={crash_at}")
        # memory-failure group notification margin
        cfg = scenario.load_bundled("paxos_memfail_notice")
        report = harness.run(cfg)
        m = report.metrics["transfer"]
        fail_at = us(cfg["failures"][0]["at_us"])
        notices = [n["t"] for n in m["notices"]
                   if n["detail"].get("failure") == "memory"]
        assert notices, "no memory-failure notice observed"
        margin = (fail_at + timeout_ticks) - min(notices)
        assert margin > us(100), f"margin only {margin} ticks"
        assert report.invariants["agreement"] == "pass"
    _report(5, "early failure detection", t)


def test_criterion_6_crash_consistency_sweep():
    """Every inter-event crash point of a 50-transaction heap workload
    recovers to the sequential oracle's committed prefix."""
    with _timed(60.0) as t:
        cfg = scenario.load_bundled("ccheap_50tx")
        result = harness.crash_sweep(cfg)
        assert result["transactions"] == 50
        assert result["crash_points"] >= 300
        assert result["n_divergences"] == 0, result["divergences"][:3]
        assert result["ok"]
    _report(6, f"crash-consistency oracle sweep", t)


def test_criterion_7_primitive_invariant_fuzz():
    """1000-seed fuzz of random grant/steal/fail scripts over 4 processes x
    32 pages: zero violations of the five reassignment invariants."""
    with _timed(60.0) as t:
        cfg = scenario.load_bundled("primitives_fuzz")
        result = harness.fuzz(cfg, 1000)
        for check in ("single-owner", "address-stability",
                      "content-preservation", "capability-soundness",
                      "revoke-before-reassign"):
            assert result["checks_evaluated"][check] == 1000
            assert not [v for v in result["violations"]
                        if v["check"] == check]
        assert result["ok"]
    _report(7, "single-owner and gift-permanence fuzz (1000 seeds)", t)


def test_criterion_8_straggler_stealing():
    """Steal-based resumption re-executes at most the in-flight unit and
    strictly fewer units than restart-from-scratch on the paired run."""
    with _timed(5.0) as t:
        cfg = scenario.load_bundled("straggler_steal_vs_restart")
        report = harness.run(cfg)
        steal = report.metrics["steal"]
        restart = report.metrics["restart"]
        assert steal["reexecuted_units"] <= 1
        assert steal["reexecuted_units"] < restart["reexecuted_units"]
        assert steal["all_done"] and restart["all_done"]
        assert report.ok
    _report(8, "straggler stealing accounting", t)


def test_criterion_9_determinism(tmp_path):
    """Same scenario + seed twice: byte-identical trace files."""
    with _timed(5.0) as t:
        for name in ("shuffle_3rtt_vs_grant", "paxos_reincarnate_vs_transfer"):
            cfg = scenario.load_bundled(name)
            p1 = tmp_path / f"{name}-1.jsonl"
            p2 = tmp_path / f"{name}-2.jsonl"
            harness.run(cfg, trace_out=str(p1))
            harness.run(cfg, trace_out=str(p2))
            assert p1.read_bytes() == p2.read_bytes()
            assert p1.stat().st_size > 0
    _report(9, "byte-identical traces", t)
