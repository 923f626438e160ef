import pytest

from ddcsim.cluster import Cluster
from ddcsim.computeos import Process
from ddcsim.latency import profile
from ddcsim.units import us


class Probe(Process):
    """Process that records everything delivered to it."""

    def __init__(self, pid, os, handle_faults=False):
        super().__init__(pid, os)
        self.signals = []
        self.messages = []
        self.timers = []
        self.signal_handlers["page-added"] = self._record
        self.signal_handlers["group-failure-notice"] = self._record
        if handle_faults:
            self.signal_handlers["memory-fault"] = self._record

    def _record(self, sig):
        self.signals.append((self.os.sim.now, sig))

    def on_message(self, payload, src_pid):
        self.messages.append((self.os.sim.now, src_pid, payload))

    def on_timer(self, name, data):
        self.timers.append((self.os.sim.now, name, data))


class Script:
    """Actor that runs scheduled closures, for driving test scenarios."""

    def __init__(self, sim, rack=0):
        self.sim = sim
        self.element_id = "script"
        self.rack = rack
        sim.add_actor(self)

    def at(self, t, fn):
        self.sim.schedule("script", fn, extra_delay=t - self.sim.now)

    def on_event(self, fn):
        fn()


@pytest.fixture
def make_cluster():
    def build(n_racks=1, n_compute=2, n_memory=2, frames=8, profile_name="current",
              seed=0, **kw):
        cluster = Cluster(profile(profile_name), seed=seed, **kw)
        for _ in range(n_racks):
            cluster.add_rack(n_compute, n_memory, frames)
        return cluster
    return build


@pytest.fixture
def rig(make_cluster):
    """One rack, two probes on distinct compute elements, plus a script."""
    cluster = make_cluster(monitor_enabled=False)
    p1 = cluster.spawn(0, lambda pid, os: Probe(pid, os), element_id="r0.c0")
    p2 = cluster.spawn(0, lambda pid, os: Probe(pid, os), element_id="r0.c1")
    script = Script(cluster.sim)
    return cluster, p1, p2, script


def run(cluster, until_us=1000):
    return cluster.sim.run_until(us(until_us))
