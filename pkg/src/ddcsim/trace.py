"""Simulation trace: the ordered record of everything observable in a run.

Records are plain dicts {"t": ticks, "actor": id, "kind": str, ...}. Two runs
with the same config and seed must serialize to byte-identical JSONL, so
serialization is canonical (sorted keys, no whitespace).
"""

from __future__ import annotations

import json
from typing import Callable, Iterable


def canonical_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class SimTrace:
    """Append-only event record with per-kind subscriber hooks.

    Invariant checkers subscribe to kinds; they run even when record
    collection is disabled (fuzz runs keep memory flat that way).
    """

    def __init__(self, collect: bool = True):
        self.collect = collect
        self.records: list[dict] = []
        self._hooks: dict[str, list[Callable[[dict], None]]] = {}

    def subscribe(self, kinds: Iterable[str], hook: Callable[[dict], None]) -> None:
        for kind in kinds:
            self._hooks.setdefault(kind, []).append(hook)

    def emit(self, record: dict) -> None:
        if self.collect:
            self.records.append(record)
        hooks = self._hooks.get(record["kind"])
        if hooks:
            for hook in hooks:
                hook(record)

    def to_jsonl(self) -> str:
        return "".join(canonical_line(r) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    def by_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def __len__(self) -> int:
        return len(self.records)
