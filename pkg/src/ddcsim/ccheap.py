"""Crash-consistent heap inside simulated remote pages.

An arena is a list of pages: header (magic, version, bump pointer, root map,
page list), an undo-log region, and a bump-allocated data region. Every
mutation is a transaction: each write first appends an undo record (one
simulated write, never spanning a page), then applies the data write; the
commit marker lands last and truncation bumps the log generation so stale
records become invisible. recover() rebuilds a usable arena from the pages
alone, rolling back the at-most-one uncommitted transaction, so a process
that steals the pages can resume from a state equal to some committed prefix.

Byte layout (page size 4096):
  page 0          header: magic "DDCH" | version u32 | n_pages u32 |
                  log_pages u32 | generation u32 | bump u64 @24 |
                  roots 64 x 32B @64 | page list u64 x n_pages @2176
  pages 1..L      undo log (records never cross page boundaries)
  pages L+1..     data region (bump allocated)

Log records: write = 0x01 | gen u32 | txid u32 | vaddr u64 | len u16 | old |
new; commit = 0x02 | gen u32 | txid u32; pad-to-page-end = 0x03 | gen u32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .addressing import AddressConfig

MAGIC = b"DDCH"
VERSION = 1
ROOT_CAPACITY = 64
ROOT_NAME_MAX = 24
ROOT_ENTRY_SIZE = 32
ROOTS_OFF = 64
PAGELIST_OFF = ROOTS_OFF + ROOT_CAPACITY * ROOT_ENTRY_SIZE + 64
BUMP_OFF = 24
GEN_OFF = 16
WRITE_CHUNK = 1024          # caller writes split so records stay small

REC_WRITE = 1
REC_COMMIT = 2
REC_PAD = 3

_WRITE_HDR = struct.Struct("<BIIQH")   # kind, gen, txid, vaddr, len
_COMMIT_REC = struct.Struct("<BII")    # kind, gen, txid
_PAD_REC = struct.Struct("<BI")        # kind, gen


class ArenaError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}{': ' + detail if detail else ''}")
        self.code = code


def _read(ranges, ctx):
    return ("r", tuple(ranges), None, ctx)


def _write(vaddr, data, ctx):
    return ("w", ((vaddr, len(data)),), bytes(data), ctx)


class Arena:
    """Owner-side handle: page list plus a local mirror of header metadata.

    The mirror (bump, roots, log head, generation) is planning state in the
    owner's control block; the pages are the truth and the mirror is rebuilt
    from them by recover(). Single writer per arena.
    """

    def __init__(self, addressing: AddressConfig, pages: list[int], log_pages: int):
        if len(pages) < log_pages + 2:
            raise ArenaError("arena-too-small")
        self.addressing = addressing
        self.pages = list(pages)
        self.log_pages = log_pages
        self.page_size = addressing.page_size
        self.generation = 1
        self.log_head = 0
        self.bump = 0
        self.roots: dict[str, tuple[int, int]] = {}   # name -> (slot, vaddr)
        self.next_txid = 1
        self.active_tx: Optional[int] = None
        self._bump_dirty = False
        self.defect: Optional[str] = None   # harness self-test hook

    # ------------------------------------------------------------- addressing

    def _page_vaddr(self, logical_page: int, offset: int) -> int:
        return self.pages[logical_page] + offset

    def header_vaddr(self, offset: int) -> int:
        return self._page_vaddr(0, offset)

    def log_vaddr(self, offset: int) -> int:
        return self._page_vaddr(1 + offset // self.page_size,
                                offset % self.page_size)

    def data_vaddr(self, offset: int) -> int:
        base = 1 + self.log_pages
        return self._page_vaddr(base + offset // self.page_size,
                                offset % self.page_size)

    @property
    def log_capacity(self) -> int:
        return self.log_pages * self.page_size

    @property
    def data_capacity(self) -> int:
        return (len(self.pages) - 1 - self.log_pages) * self.page_size

    # ------------------------------------------------------------- allocation

    def alloc(self, size: int, align: int = 8) -> int:
        """Advance the bump pointer (mirror); persisted by the next tx."""
        bump = (self.bump + align - 1) // align * align
        if bump + size > self.data_capacity:
            raise ArenaError("arena-full", f"{size} bytes")
        self.bump = bump + size
        self._bump_dirty = True
        return self.data_vaddr(bump)

    # ------------------------------------------------------------ header bytes

    def _header_bytes(self) -> bytes:
        head = bytearray(self.page_size)
        head[0:4] = MAGIC
        struct.pack_into("<I", head, 4, VERSION)
        struct.pack_into("<I", head, 8, len(self.pages))
        struct.pack_into("<I", head, 12, self.log_pages)
        struct.pack_into("<I", head, GEN_OFF, self.generation)
        struct.pack_into("<Q", head, BUMP_OFF, self.bump)
        for name, (slot, vaddr) in self.roots.items():
            off = ROOTS_OFF + slot * ROOT_ENTRY_SIZE
            head[off:off + ROOT_NAME_MAX] = name.encode().ljust(ROOT_NAME_MAX, b"\0")
            struct.pack_into("<Q", head, off + ROOT_NAME_MAX, vaddr)
        for i, vaddr in enumerate(self.pages):
            struct.pack_into("<Q", head, PAGELIST_OFF + 8 * i, vaddr)
        return bytes(head)

    def _root_entry(self, name: str, vaddr: int) -> tuple[int, bytes]:
        """(entry vaddr, 32-byte entry) for a root, assigning a slot if new."""
        if len(name.encode()) > ROOT_NAME_MAX:
            raise ArenaError("root-name-too-long", name)
        if name in self.roots:
            slot = self.roots[name][0]
        else:
            used = {s for s, _ in self.roots.values()}
            free = [s for s in range(ROOT_CAPACITY) if s not in used]
            if not free:
                raise ArenaError("root-map-full")
            slot = free[0]
        self.roots[name] = (slot, vaddr)
        entry = name.encode().ljust(ROOT_NAME_MAX, b"\0") + struct.pack("<Q", vaddr)
        return self.header_vaddr(ROOTS_OFF + slot * ROOT_ENTRY_SIZE), entry

    def get_root(self, name: str) -> int:
        if name not in self.roots:
            raise ArenaError("unknown-root", name)
        return self.roots[name][1]

    # ------------------------------------------------------------ transactions

    def tx_begin(self) -> int:
        if self.active_tx is not None:
            raise ArenaError("tx-already-open")
        self.active_tx = self.next_txid
        self.next_txid += 1
        return self.active_tx

    def op_format(self):
        """Microprogram: write a fresh header (pages arrive zero-filled)."""
        yield _write(self.pages[0], self._header_bytes(), "heap-format")
        return self

    def op_set_root(self, name: str, vaddr: int):
        """Persist one named root transactionally (own tx if none is open)."""
        if self.active_tx is not None:
            entry_vaddr, entry = self._root_entry(name, vaddr)
            yield from self.op_tx_write(entry_vaddr, entry)
        else:
            yield from self.op_tx([], roots=[(name, vaddr)])
        return vaddr

    def op_tx(self, writes, roots=()):
        """One whole transaction: begin, write-ahead each write (plus the
        bump pointer and any root entries), commit, truncate."""
        txid = self.tx_begin()
        if self._bump_dirty:
            yield from self.op_tx_write(self.header_vaddr(BUMP_OFF),
                                        struct.pack("<Q", self.bump))
            self._bump_dirty = False
        for vaddr, data in writes:
            data = bytes(data)
            for pos in range(0, len(data), WRITE_CHUNK):
                yield from self.op_tx_write(vaddr + pos, data[pos:pos + WRITE_CHUNK])
        for name, root_vaddr in roots:
            entry_vaddr, entry = self._root_entry(name, root_vaddr)
            yield from self.op_tx_write(entry_vaddr, entry)
        yield from self.op_tx_commit()
        return txid

    def op_tx_write(self, vaddr: int, data: bytes):
        """Write-ahead one mutation: read old bytes, append the undo record
        (one write), then apply the data write (second write)."""
        if self.active_tx is None:
            raise ArenaError("no-open-tx")
        data = bytes(data)
        if self.defect == "data-before-log":
            yield _write(vaddr, data, "tx-data")
        old = yield _read([(vaddr, len(data))], "tx-read-old")
        record = _WRITE_HDR.pack(REC_WRITE, self.generation, self.active_tx,
                                 vaddr, len(data)) + old + data
        yield from self._op_append(record)
        if self.defect != "data-before-log":
            yield _write(vaddr, data, "tx-data")

    def op_tx_commit(self):
        if self.active_tx is None:
            raise ArenaError("no-open-tx")
        marker = _COMMIT_REC.pack(REC_COMMIT, self.generation, self.active_tx)
        yield from self._op_append(marker, ctx="tx-marker")
        # truncation: bumping the generation makes every record stale
        self.generation += 1
        self.log_head = 0
        self.active_tx = None
        yield _write(self.header_vaddr(GEN_OFF),
                     struct.pack("<I", self.generation), "tx-truncate")

    def _op_append(self, record: bytes, ctx: str = "tx-record"):
        """Append one log record; records never cross a page boundary, so a
        single simulated write makes them visible atomically."""
        assert len(record) <= self.page_size
        room = self.page_size - self.log_head % self.page_size
        if room < len(record):
            if self.log_head + room + len(record) > self.log_capacity:
                raise ArenaError("log-full")
            yield _write(self.log_vaddr(self.log_head),
                         _PAD_REC.pack(REC_PAD, self.generation), "tx-pad")
            self.log_head += room
        if self.log_head + len(record) > self.log_capacity:
            raise ArenaError("log-full")
        yield _write(self.log_vaddr(self.log_head), record, ctx)
        self.log_head += len(record)


# ----------------------------------------------------------- recovery parsing

def parse_header(raw: bytes, addressing: AddressConfig):
    """Header page bytes -> (n_pages, log_pages, generation, bump, roots,
    page list). Raises corrupt-arena on a bad magic or version."""
    if raw[0:4] != MAGIC:
        raise ArenaError("corrupt-arena", "bad magic")
    version, n_pages, log_pages, generation = struct.unpack_from("<IIII", raw, 4)
    if version != VERSION:
        raise ArenaError("corrupt-arena", f"version {version}")
    (bump,) = struct.unpack_from("<Q", raw, BUMP_OFF)
    roots = {}
    for slot in range(ROOT_CAPACITY):
        off = ROOTS_OFF + slot * ROOT_ENTRY_SIZE
        name = raw[off:off + ROOT_NAME_MAX].rstrip(b"\0")
        if name:
            (vaddr,) = struct.unpack_from("<Q", raw, off + ROOT_NAME_MAX)
            roots[name.decode()] = (slot, vaddr)
    pages = [struct.unpack_from("<Q", raw, PAGELIST_OFF + 8 * i)[0]
             for i in range(n_pages)]
    return n_pages, log_pages, generation, bump, roots, pages


def parse_log(raw: bytes, generation: int, page_size: int):
    """Scan current-generation records: -> (records, committed txids).
    records = [(txid, vaddr, old, new)] in append order."""
    records = []
    committed = set()
    pos = 0
    while pos < len(raw):
        kind = raw[pos]
        if kind == REC_WRITE:
            if pos + _WRITE_HDR.size > len(raw):
                break
            _, gen, txid, vaddr, length = _WRITE_HDR.unpack_from(raw, pos)
            if gen != generation:
                break
            body = pos + _WRITE_HDR.size
            if body + 2 * length > len(raw):
                break
            old = raw[body:body + length]
            new = raw[body + length:body + 2 * length]
            records.append((txid, vaddr, old, new))
            pos = body + 2 * length
        elif kind == REC_COMMIT:
            if pos + _COMMIT_REC.size > len(raw):
                break
            _, gen, txid = _COMMIT_REC.unpack_from(raw, pos)
            if gen != generation:
                break
            committed.add(txid)
            pos += _COMMIT_REC.size
        elif kind == REC_PAD:
            if pos + _PAD_REC.size > len(raw):
                break
            _, gen = _PAD_REC.unpack_from(raw, pos)
            if gen != generation:
                break
            pos = (pos // page_size + 1) * page_size
        else:
            break
    return records, committed


def op_recover(addressing: AddressConfig, page_vaddrs):
    """Microprogram: rebuild an Arena from raw pages only.

    Finds the header among the candidate pages, rolls back uncommitted
    records in reverse order, truncates the log, and returns ("ok", arena)
    or (error code, None). Idempotent. Uses nothing but the pages.
    """
    candidates = sorted(page_vaddrs)
    header = None
    header_page = None
    for vaddr in candidates:
        raw = yield _read([(vaddr, addressing.page_size)], "recover-header")
        if raw[0:4] == MAGIC:
            header = raw
            header_page = vaddr
            break
    if header is None:
        return "corrupt-arena", None
    try:
        n_pages, log_pages, generation, bump, roots, pages = parse_header(
            header, addressing)
    except ArenaError as err:
        return err.code, None
    if pages[0] != header_page or any(p not in set(candidates) for p in pages):
        return "missing-pages", None
    arena = Arena(addressing, pages, log_pages)
    arena.generation = generation
    log_raw = yield _read([(arena.log_vaddr(0), arena.log_capacity)],
                          "recover-log")
    records, committed = parse_log(log_raw, generation, addressing.page_size)
    undone = False
    for txid, vaddr, old, _new in reversed(records):
        if txid not in committed:
            yield _write(vaddr, old, "recover-undo")
            undone = True
    if undone:
        # rolled-back records may have targeted the header page itself
        # (root entries, bump pointer): re-read it before trusting them
        header = yield _read([(header_page, addressing.page_size)],
                             "recover-header")
        _, _, _, bump, roots, _ = parse_header(header, addressing)
    arena.bump = bump
    arena.roots = dict(roots)
    if records:
        arena.next_txid = max(txid for txid, *_ in records) + 1
    arena.generation += 1
    arena.log_head = 0
    yield _write(arena.header_vaddr(GEN_OFF),
                 struct.pack("<I", arena.generation), "recover-truncate")
    return "ok", arena


# --------------------------------------------------------------- local driver

class LocalStore:
    """Synchronous page store driving the same microprograms outside the
    simulator; crash points land between per-page write segments, mirroring
    the event granularity of the simulated path."""

    def __init__(self, addressing: AddressConfig):
        self.addressing = addressing
        self.pages: dict[int, bytearray] = {}
        self.writes_applied = 0
        self.marker_writes = 0

    def add_pages(self, vaddrs) -> None:
        for vaddr in vaddrs:
            self.pages[self.addressing.page_base(vaddr)] = bytearray(
                self.addressing.page_size)

    def _segments(self, vaddr: int, length: int):
        page_size = self.addressing.page_size
        pos = 0
        while pos < length:
            cursor = vaddr + pos
            offset = self.addressing.offset(cursor)
            chunk = min(length - pos, page_size - offset)
            yield self.addressing.page_base(cursor), offset, pos, chunk
            pos += chunk

    def read(self, vaddr: int, length: int) -> bytes:
        out = bytearray()
        for base, offset, _pos, chunk in self._segments(vaddr, length):
            out += self.pages[base][offset:offset + chunk]
        return bytes(out)

    def write(self, vaddr: int, data: bytes) -> None:
        for base, offset, pos, chunk in self._segments(vaddr, len(data)):
            self.pages[base][offset:offset + chunk] = data[pos:pos + chunk]

    def drive(self, gen, crash_after: Optional[int] = None):
        """Run a microprogram; with crash_after, stop (losing the rest) once
        that many write segments have been applied. Returns (finished,
        result)."""
        result = None
        value = None
        while True:
            try:
                op, ranges, data, ctx = gen.send(value)
            except StopIteration as stop:
                return True, stop.value
            if op == "r":
                value = b"".join(self.read(v, n) for v, n in ranges)
                continue
            (vaddr, length), = ranges
            for base, offset, pos, chunk in self._segments(vaddr, length):
                if crash_after is not None and self.writes_applied >= crash_after:
                    gen.close()
                    return False, None
                self.pages[base][offset:offset + chunk] = data[pos:pos + chunk]
                self.writes_applied += 1
                if ctx == "tx-marker":
                    self.marker_writes += 1
            value = True
