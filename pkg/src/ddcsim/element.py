"""Proxied memory element: frames plus local access enforcement.

Every access is checked against the element's own page table, keyed by
(owning pid, virtual page). The table is written only by the Rack MMU;
enforcement is local so a stale or hostile compute element can never read a
frame it no longer owns. A failed element either goes silent (callers time
out) or, in explicit mode, its proxy answers every access with an error.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

from .addressing import AddressConfig


@dataclass(frozen=True)
class AccessRequest:
    req_id: int
    reply_to: str           # compute element id
    pid: int
    op: str                 # "r" | "w"
    ranges: tuple           # ((vaddr, length), ...)
    data: Optional[bytes]   # write payload, len == sum of range lengths
    ctx: str = ""           # caller label carried into the trace


@dataclass(frozen=True)
class AccessReply:
    req_id: int
    pid: int
    ok: bool
    data: Optional[bytes] = None
    error: Optional[str] = None
    vaddr: Optional[int] = None


@dataclass
class ElementHealth:
    state: str = "alive"              # "alive" | "failed"
    failed_at: Optional[int] = None
    mode: str = "silent"              # "silent" | "explicit"


def frame_digest(data: bytes) -> int:
    return zlib.crc32(data)


@dataclass
class PageEntry:
    frame_index: int
    perms: str  # subset of "rw"


class MemoryElement:
    def __init__(self, sim, element_id: str, rack: int, capacity: int,
                 addressing: AddressConfig):
        self.sim = sim
        self.element_id = element_id
        self.rack = rack
        self.addressing = addressing
        self.capacity = capacity
        self.table: dict[tuple[int, int], PageEntry] = {}
        self.frames: list[bytearray] = []
        self.health = ElementHealth()
        sim.add_actor(self)

    # -- frame pool (frames are never recycled; reassignment moves mappings,
    #    not bytes) -----------------------------------------------------------

    def free_frames(self) -> int:
        return self.capacity - len(self.frames)

    def take_frame(self) -> int:
        if not self.free_frames():
            raise RuntimeError("element out of frames")
        self.frames.append(bytearray(self.addressing.page_size))
        return len(self.frames) - 1

    # -- control plane (Rack MMU only; same-event mutations) -----------------

    def set_entry(self, pid: int, vpage: int, frame_index: int, perms: str = "rw") -> None:
        self.table[(pid, vpage)] = PageEntry(frame_index, perms)
        self.sim.trace_record(
            self.element_id, "set-entry", pid=pid, vpage=vpage,
            frame=frame_index, perms=perms,
            digest=frame_digest(bytes(self.frames[frame_index])))

    def clear_entry(self, pid: int, vpage: int) -> None:
        entry = self.table.pop((pid, vpage), None)
        if entry is None:
            return
        self.sim.trace_record(
            self.element_id, "clear-entry", pid=pid, vpage=vpage,
            frame=entry.frame_index,
            digest=frame_digest(bytes(self.frames[entry.frame_index])))

    def entries_for_pid(self, pid: int) -> list[tuple[int, PageEntry]]:
        return [(vp, e) for (p, vp), e in self.table.items() if p == pid]

    # -- failure injection ----------------------------------------------------

    def inject_failure(self, mode: str = "silent") -> None:
        if self.health.state == "failed":
            return
        self.health = ElementHealth("failed", self.sim.now, mode)
        self.sim.trace_record(self.element_id, "element-failed", mode=mode)

    # -- data path -------------------------------------------------------------

    def on_event(self, msg) -> None:
        if isinstance(msg, AccessRequest):
            self._handle_access(msg)

    def _handle_access(self, req: AccessRequest) -> None:
        from .latency import LinkClass

        if self.health.state == "failed":
            if self.health.mode == "explicit":
                self._reply(req, AccessReply(req.req_id, req.pid, False,
                                             error="element-error"))
            # silent mode: no response, the caller's timeout governs
            return
        ok, result = self._check_and_apply(req)
        if ok:
            data = result if req.op == "r" else None
            self.sim.trace_record(self.element_id, "mem-access", pid=req.pid,
                                  op=req.op, ok=True, src=req.reply_to,
                                  n=sum(n for _, n in req.ranges), ctx=req.ctx)
            self._reply(req, AccessReply(req.req_id, req.pid, True, data=data))
        else:
            error, vaddr = result
            self.sim.trace_record(self.element_id, "mem-fault", pid=req.pid,
                                  op=req.op, error=error, vaddr=vaddr,
                                  src=req.reply_to, ctx=req.ctx)
            self._reply(req, AccessReply(req.req_id, req.pid, False,
                                         error=error, vaddr=vaddr))

    def _reply(self, req: AccessRequest, reply: AccessReply) -> None:
        from .latency import LinkClass
        self.sim.send(self.element_id, req.reply_to, reply,
                      LinkClass.RACK_MMU_INTERCONNECT)

    def _check_and_apply(self, req: AccessRequest):
        """Validate every touched page, then perform the whole access.

        Checks run before any mutation so a partially-authorized bulk write
        cannot alter state.
        """
        addressing = self.addressing
        page_size = addressing.page_size
        pieces: list[tuple[int, int, int]] = []  # (frame_index, offset, length)
        for vaddr, length in req.ranges:
            remaining = length
            cursor = vaddr
            while remaining > 0:
                vpage = addressing.vpage(cursor)
                offset = addressing.offset(cursor)
                chunk = min(remaining, page_size - offset)
                entry = self.table.get((req.pid, vpage))
                if entry is None:
                    return False, ("no-entry", cursor)
                if req.op not in entry.perms:
                    return False, ("permission", cursor)
                pieces.append((entry.frame_index, offset, chunk))
                cursor += chunk
                remaining -= chunk
        if req.op == "r":
            out = bytearray()
            for frame_index, offset, chunk in pieces:
                out += self.frames[frame_index][offset:offset + chunk]
            return True, bytes(out)
        pos = 0
        for frame_index, offset, chunk in pieces:
            self.frames[frame_index][offset:offset + chunk] = req.data[pos:pos + chunk]
            pos += chunk
        return True, None

    # -- direct state helpers (scenario setup and checkers) --------------------

    def frame_bytes(self, frame_index: int) -> bytes:
        return bytes(self.frames[frame_index])

    def poke_frame(self, frame_index: int, offset: int, data: bytes) -> None:
        """Scenario-setup backdoor: preload content before the run starts."""
        self.frames[frame_index][offset:offset + len(data)] = data
