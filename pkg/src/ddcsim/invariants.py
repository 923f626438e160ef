"""Run-wide invariant checkers.

Checkers subscribe to trace records as they are emitted (they run even when
trace collection is off) and accumulate violations; finalize() adds the
end-of-run structural checks. Every fuzz criterion reads the result summary
produced here.
"""

from __future__ import annotations

from .addressing import FrameId

CHECKS = (
    "single-owner",
    "address-stability",
    "content-preservation",
    "capability-soundness",
    "revoke-before-reassign",
    "fence-soundness",
    "mirror-convergence",
)


class InvariantMonitor:
    def __init__(self, cluster):
        self.cluster = cluster
        self.violations: list[dict] = []
        # (element, frame) -> ("owned", pid) | ("cleared", pid)
        self._frame_state: dict[tuple[str, int], tuple[str, int]] = {}
        # (element, frame) -> (t, digest) of the last clear
        self._last_clear: dict[tuple[str, int], tuple[int, int]] = {}
        # (element, frame) -> vpage assigned at allocation
        self._born_vpage: dict[tuple[str, int], int] = {}
        self._fenced_at: dict[str, int] = {}
        trace = cluster.sim.trace
        trace.subscribe(["set-entry"], self._on_set)
        trace.subscribe(["clear-entry"], self._on_clear)
        trace.subscribe(["mmu-op"], self._on_mmu_op)
        trace.subscribe(["fence-added"], self._on_fence)
        trace.subscribe(["mem-access"], self._on_access)

    def _flag(self, check: str, **detail) -> None:
        detail["check"] = check
        self.violations.append(detail)

    # ------------------------------------------------------------ record hooks

    def _on_set(self, rec: dict) -> None:
        key = (rec["actor"], rec["frame"])
        state = self._frame_state.get(key)
        if state is not None and state[0] == "owned" and state[1] != rec["pid"]:
            self._flag("single-owner", element=rec["actor"], frame=rec["frame"],
                       prev_pid=state[1], new_pid=rec["pid"], t=rec["t"])
            self._flag("revoke-before-reassign", element=rec["actor"],
                       frame=rec["frame"], new_pid=rec["pid"], t=rec["t"])
        self._frame_state[key] = ("owned", rec["pid"])
        born = self._born_vpage.setdefault(key, rec["vpage"])
        if rec["vpage"] != born:
            self._flag("address-stability", element=rec["actor"],
                       frame=rec["frame"], born=born, now=rec["vpage"], t=rec["t"])
        last_clear = self._last_clear.get(key)
        if last_clear is not None and last_clear[0] == rec["t"]:
            # reassignment transaction: same-event clear then set must carry
            # identical frame content
            if last_clear[1] != rec["digest"]:
                self._flag("content-preservation", element=rec["actor"],
                           frame=rec["frame"], t=rec["t"])

    def _on_clear(self, rec: dict) -> None:
        key = (rec["actor"], rec["frame"])
        state = self._frame_state.get(key)
        self._frame_state[key] = ("cleared", state[1] if state else rec["pid"])
        self._last_clear[key] = (rec["t"], rec["digest"])

    def _on_mmu_op(self, rec: dict) -> None:
        if rec.get("op") != "steal" or rec.get("noop"):
            return
        caller, src = rec["caller"], rec["src"]
        if caller != src and not self.cluster.share_group(caller, src):
            self._flag("capability-soundness", caller=caller, src=src, t=rec["t"])

    def _on_fence(self, rec: dict) -> None:
        self._fenced_at.setdefault(rec["element"], rec["t"])

    def _on_access(self, rec: dict) -> None:
        fenced_at = self._fenced_at.get(rec["src"])
        if fenced_at is not None and rec["op"] == "w" and rec["t"] > fenced_at:
            self._flag("fence-soundness", element=rec["src"], t=rec["t"])

    # --------------------------------------------------------------- finalize

    def finalize(self) -> dict:
        owners: dict[FrameId, int] = {}
        for rack in self.cluster.racks:
            for pid, table in rack.mmu.tables.items():
                for vpage, entry in table.entries.items():
                    if entry.frame in owners:
                        self._flag("single-owner", frame=str(entry.frame),
                                   pids=[owners[entry.frame], pid], t=-1)
                    owners[entry.frame] = pid
                # a reserved address must never also be mapped
                overlap = table.reserved_vpages & set(table.entries)
                if overlap:
                    self._flag("address-stability", pid=pid,
                               reserved_and_mapped=sorted(overlap), t=-1)
            # proxy-mirror convergence: with updates drained, no element
            # grants access the Rack MMU does not also record (revoked pages
            # are absent at the element by design, so containment is one-way)
            for element in rack.memory:
                for (pid, vpage), page_entry in element.table.items():
                    mmu_entry = rack.mmu.table_for(pid).entries.get(vpage)
                    if (mmu_entry is None
                            or mmu_entry.frame.element != element.element_id
                            or mmu_entry.frame.index != page_entry.frame_index):
                        self._flag("mirror-convergence",
                                   element=element.element_id, pid=pid,
                                   vpage=vpage, t=-1)
        summary = {}
        for check in CHECKS:
            failures = [v for v in self.violations if v["check"] == check]
            summary[check] = "pass" if not failures else "fail"
        return summary
