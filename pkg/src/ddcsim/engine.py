"""Deterministic discrete-event engine.

One Simulator instance is one independent single-threaded event loop: a heap
of (fire_at, ordinal) events, a registry of actors keyed by element id, one
seeded RNG, and the trace. Ties in fire time break by scheduling ordinal, so
equal-timestamp events run FIFO.
"""

from __future__ import annotations

import heapq
import random
from typing import Any, Callable, NamedTuple

from .latency import LatencyModel, LinkClass, TOR_CLASSES
from .trace import SimTrace


class UnknownTargetError(Exception):
    pass


class Event(NamedTuple):
    fire_at: int
    ordinal: int
    target: str
    payload: Any


class Simulator:
    def __init__(self, latency: LatencyModel, seed: int = 0,
                 collect_trace: bool = True):
        self.latency = latency
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self.trace = SimTrace(collect=collect_trace)
        self.halted = False
        self.actors: dict[str, Any] = {}
        self.fenced: set[str] = set()
        self.events_dispatched = 0
        # harness hook: called with the index of each dispatched event
        self.after_event: Callable[[int], None] | None = None
        self.link_messages = {lc: 0 for lc in LinkClass}
        self.tor_payload_bytes = 0
        self._heap: list[Event] = []
        self._next_ordinal = 0

    # -- registry ----------------------------------------------------------

    def add_actor(self, actor) -> None:
        self.actors[actor.element_id] = actor

    # -- latency -----------------------------------------------------------

    def rtt(self, link: LinkClass) -> int:
        return self.latency.rtt(link)

    def one_way(self, link: LinkClass) -> int:
        return self.latency.one_way(link, self.rng)

    # -- scheduling --------------------------------------------------------

    def schedule(self, target: str, payload, link: LinkClass | None = None,
                 extra_delay: int = 0) -> int:
        """Enqueue delivery of payload to target after the link's one-way
        latency (immediate when link is None). Returns the event ordinal."""
        if target not in self.actors:
            raise UnknownTargetError(target)
        if extra_delay < 0:
            raise ValueError("events cannot be scheduled in the past")
        delay = extra_delay
        if link is not None:
            delay += self.one_way(link)
        ordinal = self._next_ordinal
        self._next_ordinal += 1
        heapq.heappush(self._heap, Event(self.now + delay, ordinal, target, payload))
        return ordinal

    def send(self, src_element: str, target: str, payload,
             link: LinkClass, payload_bytes: int = 0) -> int | None:
        """schedule() plus fencing and traffic accounting.

        A fenced element's ToR messages are dropped at the switch; control
        traffic on the interconnect is governed by page-table state instead.
        """
        if link in TOR_CLASSES and src_element in self.fenced:
            self.trace_record(src_element, "tor-drop-fenced", dst=target,
                              payload=type(payload).__name__)
            return None
        self.link_messages[link] += 1
        if link in TOR_CLASSES:
            self.tor_payload_bytes += payload_bytes
        return self.schedule(target, payload, link=link)

    def fence(self, element_id: str) -> None:
        self.fenced.add(element_id)
        self.trace_record("fabric", "fence-added", element=element_id)

    # -- run loop ----------------------------------------------------------

    def run_until(self, stop) -> SimTrace:
        """Run until a tick (inclusive) or until predicate(self) is true."""
        predicate = stop if callable(stop) else None
        limit = None if callable(stop) else int(stop)
        while self._heap and not self.halted:
            if limit is not None and self._heap[0].fire_at > limit:
                break
            event = heapq.heappop(self._heap)
            assert event.fire_at >= self.now, "event scheduled in the past"
            self.now = event.fire_at
            actor = self.actors.get(event.target)
            if actor is not None:
                actor.on_event(event.payload)
            index = self.events_dispatched
            self.events_dispatched += 1
            if self.after_event is not None:
                self.after_event(index)
            if predicate is not None and predicate(self):
                break
        if limit is not None and self.now < limit and not self.halted:
            self.now = limit
        return self.trace

    # -- tracing -----------------------------------------------------------

    def trace_record(self, actor: str, kind: str, **fields) -> None:
        fields["t"] = self.now
        fields["actor"] = actor
        fields["kind"] = kind
        self.trace.emit(fields)
