"""Virtual addresses and frame names.

A virtual address packs (pid, page number, offset) into one 48-bit integer;
the pid prefix makes every process's pages globally unique, so a page can
move between address spaces without renumbering (no dangling internal
pointers). The page key used by all tables is vaddr >> offset_bits and keeps
the original allocator's prefix forever.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class AddressConfig:
    pid_bits: int = 8
    page_size: int = 4096
    vaddr_bits: int = 48

    @property
    def offset_bits(self) -> int:
        return (self.page_size - 1).bit_length()

    @property
    def page_bits(self) -> int:
        return self.vaddr_bits - self.pid_bits - self.offset_bits

    @property
    def max_pid(self) -> int:
        return (1 << self.pid_bits) - 1

    def vaddr(self, pid: int, page_number: int, offset: int = 0) -> int:
        if not 0 <= pid <= self.max_pid:
            raise ValueError(f"pid {pid} does not fit in {self.pid_bits} pid bits")
        if not 0 <= page_number < (1 << self.page_bits):
            raise ValueError(f"page number {page_number} out of range")
        if not 0 <= offset < self.page_size:
            raise ValueError(f"offset {offset} out of range")
        return (pid << (self.page_bits + self.offset_bits)) | (page_number << self.offset_bits) | offset

    def split(self, vaddr: int) -> tuple[int, int, int]:
        """vaddr -> (pid prefix, page number, offset)."""
        offset = vaddr & (self.page_size - 1)
        page_number = (vaddr >> self.offset_bits) & ((1 << self.page_bits) - 1)
        pid = vaddr >> (self.page_bits + self.offset_bits)
        return pid, page_number, offset

    def vpage(self, vaddr: int) -> int:
        """Table key: the page part of the address, pid prefix included."""
        return vaddr >> self.offset_bits

    def page_base(self, vaddr: int) -> int:
        return vaddr & ~(self.page_size - 1)

    def offset(self, vaddr: int) -> int:
        return vaddr & (self.page_size - 1)


DEFAULT_ADDRESSING = AddressConfig()


@dataclass(frozen=True, order=True)
class FrameId:
    """A physical page frame: (memory element, frame index)."""
    element: str
    index: int

    def __str__(self) -> str:
        return f"{self.element}#{self.index}"
