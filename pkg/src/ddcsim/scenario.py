"""Declarative scenario files: parsing, validation, cluster construction.

A scenario plus a seed fully determines a run. Validation failures raise
ConfigError naming the offending field; the CLI maps that to exit code 2.
"""

from __future__ import annotations

import json
from importlib import resources
from typing import Optional

from .cluster import Cluster
from .latency import PROFILE_NAMES, profile
from .mmu import Topology
from .units import us


class ConfigError(Exception):
    def __init__(self, field: str, problem: str):
        super().__init__(f"config field {field!r}: {problem}")
        self.field = field
        self.problem = problem


WORKLOAD_KINDS = ("shuffle", "shuffle-straggler", "paxos", "primitive-script",
                  "ccheap")
FAILURE_KINDS = ("compute-crash", "compute-revive", "memory-fail",
                 "process-crash", "monitor-fail")


def _require(cfg: dict, field: str, types, where: str = ""):
    path = f"{where}.{field}" if where else field
    if field not in cfg:
        raise ConfigError(path, "missing")
    value = cfg[field]
    if not isinstance(value, types):
        raise ConfigError(path, f"expected {types}, got {type(value).__name__}")
    return value


def validate(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "scenario must be a JSON object")
    _require(cfg, "name", str)
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed", "expected integer")
    prof = cfg.get("profile", "current")
    if prof not in PROFILE_NAMES:
        raise ConfigError("profile", f"unknown profile {prof!r}; "
                                     f"expected one of {sorted(PROFILE_NAMES)}")
    jitter = cfg.get("jitter_fraction", 0.0)
    if not isinstance(jitter, (int, float)) or not 0 <= jitter < 1:
        raise ConfigError("jitter_fraction", "expected number in [0, 1)")
    rack = _require(cfg, "rack", dict)
    for field in ("racks", "compute_per_rack", "memory_per_rack",
                  "frames_per_element"):
        value = _require(rack, field, int, "rack")
        if value <= 0:
            raise ConfigError(f"rack.{field}", "must be positive")
    overrides = cfg.get("latency_overrides", {})
    if not isinstance(overrides, dict):
        raise ConfigError("latency_overrides", "expected object")
    workload = _require(cfg, "workload", dict)
    kind = _require(workload, "kind", str, "workload")
    if kind not in WORKLOAD_KINDS:
        raise ConfigError("workload.kind",
                          f"unknown kind {kind!r}; expected one of {WORKLOAD_KINDS}")
    for i, failure in enumerate(cfg.get("failures", [])):
        if not isinstance(failure, dict):
            raise ConfigError(f"failures[{i}]", "expected object")
        fkind = _require(failure, "kind", str, f"failures[{i}]")
        if fkind not in FAILURE_KINDS:
            raise ConfigError(f"failures[{i}].kind",
                              f"unknown kind {fkind!r}")
        if fkind != "monitor-fail":
            _require(failure, "at_us", (int, float), f"failures[{i}]")
    t_max = cfg.get("t_max_us", 5000)
    if not isinstance(t_max, (int, float)) or t_max <= 0:
        raise ConfigError("t_max_us", "expected positive number")
    monitor = cfg.get("monitor", {})
    if not isinstance(monitor, dict):
        raise ConfigError("monitor", "expected object")
    return cfg


def build_cluster(cfg: dict, seed: Optional[int] = None,
                  profile_name: Optional[str] = None,
                  collect_trace: bool = True) -> Cluster:
    """Construct the rack(s) a validated scenario describes."""
    seed = cfg.get("seed", 0) if seed is None else seed
    prof = profile_name or cfg.get("profile", "current")
    model = profile(prof, jitter_fraction=cfg.get("jitter_fraction", 0.0),
                    overrides=cfg.get("latency_overrides") or None)
    monitor_cfg = cfg.get("monitor", {})
    kwargs = {}
    if "heartbeat_interval_us" in monitor_cfg:
        kwargs["heartbeat_interval"] = us(monitor_cfg["heartbeat_interval_us"])
    if "miss_threshold" in monitor_cfg:
        kwargs["miss_threshold"] = monitor_cfg["miss_threshold"]
    if "access_timeout_us" in cfg:
        kwargs["access_timeout"] = us(cfg["access_timeout_us"])
    cluster = Cluster(model, seed=seed, collect_trace=collect_trace,
                      monitor_enabled=monitor_cfg.get("enabled", True),
                      **kwargs)
    rack = cfg["rack"]
    topo = None
    if "links" in rack:
        topo = Topology(links={tuple(pair) for pair in rack["links"]})
    for _ in range(rack["racks"]):
        cluster.add_rack(rack["compute_per_rack"], rack["memory_per_rack"],
                         rack["frames_per_element"], topo)
    return cluster


def load_file(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as err:
        raise ConfigError("<file>", f"cannot read {path}: {err}") from err
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as err:
        raise ConfigError("<file>", f"invalid JSON at line {err.lineno}: {err.msg}") from err
    return validate(cfg)


def bundled_names() -> list[str]:
    root = resources.files("ddcsim") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_bundled(name: str) -> dict:
    root = resources.files("ddcsim") / "scenarios"
    candidate = root / f"{name}.json"
    try:
        raw = candidate.read_text()
    except FileNotFoundError:
        raise ConfigError("<scenario>", f"no bundled scenario {name!r}; "
                                        f"available: {bundled_names()}") from None
    return validate(json.loads(raw))


def load(name_or_path: str) -> dict:
    if name_or_path.endswith(".json"):
        return load_file(name_or_path)
    return load_bundled(name_or_path)
