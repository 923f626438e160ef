"""Event engine: ordering, latency arithmetic, determinism."""

import pytest

from ddcsim.engine import Simulator, UnknownTargetError
from ddcsim.latency import LinkClass, profile
from ddcsim.units import us


class Recorder:
    def __init__(self, sim, element_id, rack=0):
        self.sim = sim
        self.element_id = element_id
        self.rack = rack
        self.seen = []
        sim.add_actor(self)

    def on_event(self, payload):
        self.seen.append((self.sim.now, payload))


def make_sim(seed=0, name="current"):
    return Simulator(profile(name), seed=seed)


def test_immediate_event_fires_at_now():
    sim = make_sim()
    r = Recorder(sim, "a")
    ordinal = sim.schedule("a", "hello")
    assert ordinal == 0
    sim.run_until(us(1))
    assert r.seen == [(0, "hello")]


def test_intra_rack_message_takes_half_rtt():
    sim = make_sim()
    r = Recorder(sim, "a")
    sim.schedule("a", "m", link=LinkClass.INTRA_RACK_TOR)
    sim.run_until(us(10))
    assert r.seen == [(us(1), "m")]  # 2us RTT / 2


def test_cross_rack_from_t10():
    sim = make_sim()
    r = Recorder(sim, "a")
    sim.schedule("a", "later", extra_delay=us(10))

    def chain(payload):
        if payload == "later":
            sim.schedule("a", "x", link=LinkClass.CROSS_RACK_TOR)
        r.seen.append((sim.now, payload))

    r.on_event = chain
    sim.run_until(us(100))
    assert (us(32.5), "x") in r.seen  # 10 + 45/2


def test_unknown_target_rejected():
    sim = make_sim()
    with pytest.raises(UnknownTargetError):
        sim.schedule("nope", "x")


def test_ties_break_fifo():
    sim = make_sim()
    r = Recorder(sim, "a")
    sim.schedule("a", "A", extra_delay=us(5))
    sim.schedule("a", "B", extra_delay=us(5))
    sim.run_until(us(10))
    assert [p for _, p in r.seen] == ["A", "B"]


def test_empty_queue_clock_advances_to_stop():
    sim = make_sim()
    trace = sim.run_until(us(100))
    assert len(trace) == 0
    assert sim.now == us(100)


def test_rtt_values():
    sim = make_sim()
    assert sim.rtt(LinkClass.INTRA_RACK_TOR) == us(2)
    assert sim.rtt(LinkClass.CROSS_RACK_TOR) == us(45)


def test_deterministic_trace():
    def run():
        sim = Simulator(profile("current", jitter_fraction=0.5), seed=42)
        r = Recorder(sim, "a")

        def bounce(payload):
            r.seen.append((sim.now, payload))
            sim.trace_record("a", "got", payload=payload, at=sim.now)
            if payload < 20:
                sim.schedule("a", payload + 1, link=LinkClass.INTRA_RACK_TOR)

        r.on_event = bounce
        sim.schedule("a", 0)
        return sim.run_until(us(1000)).to_jsonl()

    assert run() == run()


def test_jitter_changes_with_seed():
    def run(seed):
        sim = Simulator(profile("current", jitter_fraction=0.9), seed=seed)
        r = Recorder(sim, "a")
        for _ in range(20):
            sim.schedule("a", "x", link=LinkClass.CROSS_RACK_TOR)
        sim.run_until(us(1000))
        return [t for t, _ in r.seen]

    assert run(1) != run(2)


def test_fenced_element_tor_messages_dropped():
    sim = make_sim()
    r = Recorder(sim, "dst")
    Recorder(sim, "src")
    sim.fence("src")
    sim.send("src", "dst", "boo", LinkClass.INTRA_RACK_TOR)
    sim.send("src", "dst", "ctl", LinkClass.RACK_MMU_INTERCONNECT)
    sim.run_until(us(10))
    assert [p for _, p in r.seen] == ["ctl"]
    assert len(sim.trace.by_kind("tor-drop-fenced")) == 1
