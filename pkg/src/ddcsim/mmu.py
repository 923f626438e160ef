"""Rack MMU: the rack's mapping authority and resource manager.

Holds one V2P table per process, hands out frames first-fit over memory
elements in id order, and reconfigures mappings for grant / steal / revoke.
All mapping mutations are serialized through this single actor; element page
tables and compute translation caches are rewritten inside the same
transaction event (clear-entry always precedes set-entry for a frame), and
the application-visible cost of a reassignment is the one control round trip
over the memory interconnect.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .addressing import AddressConfig, FrameId
from .element import MemoryElement


class MmuError(Exception):
    """Control-plane failure; .code is the stable error name."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}{': ' + detail if detail else ''}")
        self.code = code


@dataclass
class V2PEntry:
    frame: FrameId
    perms: str = "rw"
    allow_steal: bool = True


@dataclass
class V2PTable:
    """Per-process mapping from virtual page to frame.

    reserved_vpages are addresses given away by grant; they stay unusable for
    the rest of the process's lifetime so the recipient's copy of the address
    can never collide with a new local mapping.
    """

    owner: int
    entries: dict[int, V2PEntry] = field(default_factory=dict)
    reserved_vpages: set[int] = field(default_factory=set)


@dataclass(frozen=True)
class ProcessGroup:
    group_id: int
    members: frozenset[int]


@dataclass
class Topology:
    """Reachable (compute element, memory element) pairs; None = full mesh."""

    links: Optional[set[tuple[str, str]]] = None

    def reachable(self, compute_id: str, memory_id: str) -> bool:
        if self.links is None:
            return True
        return (compute_id, memory_id) in self.links


@dataclass(frozen=True)
class MmuRequest:
    req_id: int
    reply_to: str        # compute element id (or monitor)
    authority: int       # pid whose capability backs the request
    kind: str            # allocate | grant | steal | revoke | register-group | provision
    args: tuple


@dataclass(frozen=True)
class MmuReply:
    req_id: int
    ok: bool
    value: object = None
    error: Optional[str] = None


class RackMMU:
    def __init__(self, sim, cluster, rack: int, elements: list[MemoryElement],
                 addressing: AddressConfig, topology: Topology | None = None):
        self.sim = sim
        self.cluster = cluster
        self.rack = rack
        self.element_id = f"r{rack}.mmu"
        self.elements = elements  # id order = allocation order
        self.addressing = addressing
        self.topology = topology or Topology()
        self.tables: dict[int, V2PTable] = {}
        self.next_page_number: dict[int, int] = {}
        # harness self-test hook; see harness fault injection
        self.defect: Optional[str] = None
        sim.add_actor(self)

    # ------------------------------------------------------------------ util

    def table_for(self, pid: int) -> V2PTable:
        table = self.tables.get(pid)
        if table is None:
            table = self.tables[pid] = V2PTable(owner=pid)
            self.next_page_number[pid] = 0
        return table

    def _element(self, element_id: str) -> MemoryElement:
        for el in self.elements:
            if el.element_id == element_id:
                return el
        raise MmuError("unknown-element", element_id)

    def _compute_of(self, pid: int) -> str:
        info = self.cluster.process_info(pid)
        if info is None:
            raise MmuError("unknown-process", f"pid {pid}")
        return info.element_id

    def _require_running(self, pid: int, error: str) -> None:
        info = self.cluster.process_info(pid)
        if info is None:
            raise MmuError("unknown-process", f"pid {pid}")
        if info.state != "running":
            raise MmuError(error, f"pid {pid}")

    def _normalize_pages(self, pid: int, pages) -> list[int]:
        """vaddr list -> vpage list, each mapped in pid's table. Duplicate
        pages collapse to one move (first occurrence wins)."""
        table = self.table_for(pid)
        vpages = []
        seen = set()
        for vaddr in pages:
            vpage = self.addressing.vpage(vaddr)
            if vpage not in table.entries:
                raise MmuError("unmapped-page", f"pid {pid} vaddr {vaddr:#x}")
            if vpage not in seen:
                seen.add(vpage)
                vpages.append(vpage)
        return vpages

    # ------------------------------------------------------------ operations

    def allocate(self, pid: int, n_pages: int, allow_steal: bool = True) -> list[int]:
        """Map n fresh zero-filled pages for pid; returns their vaddrs."""
        self._require_running(pid, "process-dead")
        compute = self._compute_of(pid)
        if n_pages == 0:
            return []
        usable = [el for el in self.elements
                  if el.health.state == "alive" and self.topology.reachable(compute, el.element_id)]
        if not usable:
            raise MmuError("no-reachable-element", f"for pid {pid}")
        if sum(el.free_frames() for el in usable) < n_pages:
            raise MmuError("out-of-frames", f"requested {n_pages}")
        table = self.table_for(pid)
        vaddrs = []
        frames = []
        it = iter(usable)
        element = next(it)
        for _ in range(n_pages):
            while not element.free_frames():
                element = next(it)
            page_number = self.next_page_number[pid]
            self.next_page_number[pid] += 1
            vaddr = self.addressing.vaddr(pid, page_number)
            vpage = self.addressing.vpage(vaddr)
            assert vpage not in table.reserved_vpages
            frame_index = element.take_frame()
            frame = FrameId(element.element_id, frame_index)
            table.entries[vpage] = V2PEntry(frame, "rw", allow_steal)
            element.set_entry(pid, vpage, frame_index, "rw")
            vaddrs.append(vaddr)
            frames.append(str(frame))
        self.sim.trace_record(self.element_id, "mmu-op", op="allocate", pid=pid,
                              n=n_pages, frames=frames, allow_steal=allow_steal,
                              vpages=[self.addressing.vpage(v) for v in vaddrs])
        return vaddrs

    def translate(self, pid: int, vaddr: int) -> tuple[FrameId, str]:
        entry = self.table_for(pid).entries.get(self.addressing.vpage(vaddr))
        if entry is None:
            raise MmuError("unmapped-address", f"pid {pid} vaddr {vaddr:#x}")
        if not entry.perms:
            raise MmuError("permission-absent", f"pid {pid} vaddr {vaddr:#x}")
        return entry.frame, entry.perms

    def grant(self, src: int, pages: list[int], dst: int) -> list[int]:
        """Move pages from src's table to dst's at the same addresses."""
        if src == dst:
            raise MmuError("self-grant", f"pid {src}")
        self._require_running(dst, "dst-process-dead")
        vpages = self._normalize_pages(src, pages)
        self._check_reachability(dst, src, vpages)
        moved = self._move_mappings(src, vpages, dst, reserve_src=True)
        self.sim.trace_record(self.element_id, "mmu-op", op="grant", src=src,
                              dst=dst, vpages=sorted(vpages))
        return moved

    def steal(self, caller: int, src: int, pages="all",
              recipient: Optional[int] = None) -> list[int]:
        """Recipient-initiated reassignment, authorized by shared group.

        `caller` is the authority whose group membership is checked;
        `recipient` (default: caller) gets the mappings. The rack monitor's
        steal-on-behalf presents a registered handler's owner as authority
        with a freshly provisioned process as recipient.
        """
        recipient = caller if recipient is None else recipient
        if caller != src and not self.cluster.share_group(caller, src):
            raise MmuError("not-in-group", f"caller {caller} src {src}")
        self._require_running(recipient, "recipient-dead")
        table = self.table_for(src)
        if pages == "all":
            vpages = sorted(vp for vp, e in table.entries.items() if e.allow_steal)
        else:
            vpages = self._normalize_pages(src, pages)
            blocked = [vp for vp in vpages if not table.entries[vp].allow_steal]
            if blocked:
                raise MmuError("page-steal-disallowed", f"vpages {blocked}")
        if src == recipient:
            self.sim.trace_record(self.element_id, "mmu-op", op="steal", src=src,
                                  caller=caller, recipient=recipient,
                                  vpages=[], noop=True)
            return []
        for vp in vpages:
            element = self._element(table.entries[vp].frame.element)
            if element.health.state == "failed":
                raise MmuError("memory-element-failed", element.element_id)
        self._check_reachability(recipient, src, vpages)
        moved = self._move_mappings(src, vpages, recipient, reserve_src=False)
        self.sim.trace_record(self.element_id, "mmu-op", op="steal", src=src,
                              caller=caller, recipient=recipient,
                              vpages=sorted(vpages))
        return moved

    def revoke(self, pid: int, pages) -> None:
        """Cut element-side access to pid's pages without reassigning them.

        The V2P entries stay (a later steal can still move the pages); only
        the element tables forget, so a revived non-fail-stop element faults.
        """
        vpages = self._normalize_pages(pid, pages)
        table = self.table_for(pid)
        for vp in vpages:
            entry = table.entries[vp]
            self._element(entry.frame.element).clear_entry(pid, vp)
        self.cluster.invalidate_translations(pid, vpages)
        self.sim.trace_record(self.element_id, "mmu-op", op="revoke", pid=pid,
                              vpages=sorted(vpages))

    # ------------------------------------------------------------- internals

    def _check_reachability(self, new_owner: int, old_owner: int,
                            vpages: list[int]) -> None:
        compute = self._compute_of(new_owner)
        table = self.table_for(old_owner)
        for vp in vpages:
            if not self.topology.reachable(compute, table.entries[vp].frame.element):
                raise MmuError("no-reachable-element",
                               f"{compute} cannot reach {table.entries[vp].frame}")

    def _move_mappings(self, src: int, vpages: list[int], dst: int,
                       reserve_src: bool) -> list[int]:
        src_table = self.table_for(src)
        dst_table = self.table_for(dst)
        moved = []
        for vp in vpages:
            entry = src_table.entries.pop(vp)
            if reserve_src:
                src_table.reserved_vpages.add(vp)
            element = self._element(entry.frame.element)
            if self.defect != "skip-clear-entry":
                element.clear_entry(src, vp)
            dst_table.entries[vp] = entry
            # a page moving back to its original prefix owner re-occupies the
            # address it always named; the reservation exists only to keep the
            # address from naming anything else while the page is away
            dst_table.reserved_vpages.discard(vp)
            element.set_entry(dst, vp, entry.frame.index, entry.perms)
            moved.append(vp << self.addressing.offset_bits)
        self.cluster.invalidate_translations(src, vpages)
        return moved

    # ------------------------------------------------------------ event path

    def on_event(self, msg) -> None:
        from .latency import LinkClass
        if not isinstance(msg, MmuRequest):
            return
        try:
            value = self._dispatch(msg)
            reply = MmuReply(msg.req_id, True, value=value)
        except MmuError as err:
            reply = MmuReply(msg.req_id, False, error=err.code)
        link = self.cluster.link_between(self.element_id, msg.reply_to)
        self.sim.send(self.element_id, msg.reply_to, reply, link)

    def _dispatch(self, msg: MmuRequest):
        kind, args = msg.kind, msg.args
        if kind == "allocate":
            n_pages, allow_steal = args
            return self.allocate(msg.authority, n_pages, allow_steal)
        if kind == "grant":
            pages, dst = args
            moved = self.grant(msg.authority, list(pages), dst)
            self.cluster.signal_page_added(dst, moved, src=msg.authority)
            return moved
        if kind == "steal":
            src, pages, recipient = args
            moved = self.steal(msg.authority, src,
                               "all" if pages == "all" else list(pages),
                               recipient)
            target = msg.authority if recipient is None else recipient
            if moved:
                self.cluster.signal_page_added(target, moved, src=src)
            return moved
        if kind == "revoke":
            (pages,) = args
            self.revoke(msg.authority, list(pages))
            return None
        if kind == "register-group":
            (members,) = args
            return self.cluster.register_group(members)
        if kind == "provision":
            behavior, rack = args
            return self.cluster.provision(rack if rack is not None else self.rack,
                                          behavior)
        raise MmuError("unknown-request", kind)
