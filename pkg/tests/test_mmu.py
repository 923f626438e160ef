"""Rack MMU mapping semantics, exercised at the control-plane level."""

import pytest

from ddcsim.addressing import FrameId
from ddcsim.mmu import MmuError

from conftest import Probe, run


@pytest.fixture
def mmu_rig(make_cluster):
    cluster = make_cluster(frames=4, monitor_enabled=False)
    p1 = cluster.spawn(0, lambda pid, os: Probe(pid, os), element_id="r0.c0")
    p2 = cluster.spawn(0, lambda pid, os: Probe(pid, os), element_id="r0.c1")
    return cluster, cluster.racks[0].mmu, p1, p2


def test_allocate_zero_pages(mmu_rig):
    _, mmu, p1, _ = mmu_rig
    assert mmu.allocate(p1.pid, 0) == []
    assert mmu.table_for(p1.pid).entries == {}


def test_allocate_first_fit_fresh_rack(mmu_rig):
    cluster, mmu, p1, _ = mmu_rig
    vaddrs = mmu.allocate(p1.pid, 2)
    cfg = cluster.addressing
    assert vaddrs == [cfg.vaddr(p1.pid, 0), cfg.vaddr(p1.pid, 1)]
    table = mmu.table_for(p1.pid)
    frames = [table.entries[cfg.vpage(v)].frame for v in vaddrs]
    assert frames == [FrameId("r0.m0", 0), FrameId("r0.m0", 1)]


def test_allocate_spills_to_next_element(mmu_rig):
    cluster, mmu, p1, _ = mmu_rig
    vaddrs = mmu.allocate(p1.pid, 6)  # 4 frames per element
    cfg = cluster.addressing
    elements = [mmu.table_for(p1.pid).entries[cfg.vpage(v)].frame.element
                for v in vaddrs]
    assert elements == ["r0.m0"] * 4 + ["r0.m1"] * 2


def test_allocate_exhaustion(mmu_rig):
    _, mmu, p1, _ = mmu_rig
    mmu.allocate(p1.pid, 8)
    with pytest.raises(MmuError) as err:
        mmu.allocate(p1.pid, 1)
    assert err.value.code == "out-of-frames"


def test_translate_own_allocation(mmu_rig):
    _, mmu, p1, _ = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    frame, perms = mmu.translate(p1.pid, va)
    assert frame == FrameId("r0.m0", 0)
    assert perms == "rw"


def test_translate_isolation(mmu_rig):
    _, mmu, p1, p2 = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    with pytest.raises(MmuError) as err:
        mmu.translate(p2.pid, va)
    assert err.value.code == "unmapped-address"


def test_grant_moves_mapping_same_address(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    original_frame, _ = mmu.translate(p1.pid, va)
    mmu.grant(p1.pid, [va], p2.pid)
    with pytest.raises(MmuError):
        mmu.translate(p1.pid, va)
    frame, _ = mmu.translate(p2.pid, va)
    assert frame == original_frame
    # granted-away address is reserved forever at the source
    assert cluster.addressing.vpage(va) in mmu.table_for(p1.pid).reserved_vpages


def test_grant_preserves_frame_content(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    element = cluster.racks[0].memory[0]
    element.poke_frame(0, 0, b"treasure")
    mmu.grant(p1.pid, [va], p2.pid)
    assert element.frame_bytes(0)[:8] == b"treasure"


def test_grant_zero_pages(mmu_rig):
    _, mmu, p1, p2 = mmu_rig
    assert mmu.grant(p1.pid, [], p2.pid) == []


def test_self_grant_rejected(mmu_rig):
    _, mmu, p1, _ = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    with pytest.raises(MmuError) as err:
        mmu.grant(p1.pid, [va], p1.pid)
    assert err.value.code == "self-grant"


def test_grant_unowned_page(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    with pytest.raises(MmuError) as err:
        mmu.grant(p1.pid, [cluster.addressing.vaddr(p1.pid, 7)], p2.pid)
    assert err.value.code == "unmapped-page"


def test_grant_to_dead_process(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    cluster.crash_process(p2.pid)
    with pytest.raises(MmuError) as err:
        mmu.grant(p1.pid, [va], p2.pid)
    assert err.value.code == "dst-process-dead"


def test_steal_requires_shared_group(mmu_rig):
    _, mmu, p1, p2 = mmu_rig
    mmu.allocate(p1.pid, 2)
    with pytest.raises(MmuError) as err:
        mmu.steal(p2.pid, p1.pid, "all")
    assert err.value.code == "not-in-group"
    assert len(mmu.table_for(p1.pid).entries) == 2


def test_steal_all_from_crashed_groupmate(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    vaddrs = mmu.allocate(p1.pid, 3)
    cluster.register_group({p1.pid, p2.pid})
    cluster.crash_process(p1.pid)
    moved = mmu.steal(p2.pid, p1.pid, "all")
    cfg = cluster.addressing
    assert sorted(moved) == sorted(cfg.page_base(v) for v in vaddrs)
    assert mmu.table_for(p1.pid).entries == {}
    # addresses keep the dead process's prefix in the thief's table
    for va in vaddrs:
        assert cfg.vpage(va) in mmu.table_for(p2.pid).entries
        assert cfg.split(va)[0] == p1.pid


def test_steal_disallowed_flag(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    [protected] = mmu.allocate(p1.pid, 1, allow_steal=False)
    [open_page] = mmu.allocate(p1.pid, 1, allow_steal=True)
    cluster.register_group({p1.pid, p2.pid})
    with pytest.raises(MmuError) as err:
        mmu.steal(p2.pid, p1.pid, [protected])
    assert err.value.code == "page-steal-disallowed"
    # "all" silently selects only the stealable pages
    moved = mmu.steal(p2.pid, p1.pid, "all")
    assert moved == [cluster.addressing.page_base(open_page)]
    assert cluster.addressing.vpage(protected) in mmu.table_for(p1.pid).entries


def test_self_steal_is_noop(mmu_rig):
    _, mmu, p1, _ = mmu_rig
    mmu.allocate(p1.pid, 2)
    assert mmu.steal(p1.pid, p1.pid, "all") == []
    assert len(mmu.table_for(p1.pid).entries) == 2


def test_steal_from_failed_memory_element(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    mmu.allocate(p1.pid, 1)
    cluster.register_group({p1.pid, p2.pid})
    cluster.fail_memory("r0.m0")
    with pytest.raises(MmuError) as err:
        mmu.steal(p2.pid, p1.pid, "all")
    assert err.value.code == "memory-element-failed"


def test_revoke_clears_element_but_keeps_v2p(mmu_rig):
    cluster, mmu, p1, _ = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    vpage = cluster.addressing.vpage(va)
    element = cluster.racks[0].memory[0]
    mmu.revoke(p1.pid, [va])
    assert (p1.pid, vpage) not in element.table
    assert vpage in mmu.table_for(p1.pid).entries


def test_revoke_empty_and_unmapped(mmu_rig):
    cluster, mmu, p1, _ = mmu_rig
    mmu.revoke(p1.pid, [])  # no-op
    with pytest.raises(MmuError) as err:
        mmu.revoke(p1.pid, [cluster.addressing.vaddr(p1.pid, 5)])
    assert err.value.code == "unmapped-page"


def test_register_group_unknown_process(mmu_rig):
    cluster, _, p1, _ = mmu_rig
    with pytest.raises(MmuError) as err:
        cluster.register_group({p1.pid, 99})
    assert err.value.code == "unknown-process"


def test_singleton_group_authorizes_only_self(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    cluster.register_group({p1.pid})
    mmu.allocate(p2.pid, 1)
    with pytest.raises(MmuError):
        mmu.steal(p1.pid, p2.pid, "all")


def test_clear_entry_precedes_set_entry_in_steal(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    mmu.allocate(p1.pid, 2)
    cluster.register_group({p1.pid, p2.pid})
    mmu.steal(p2.pid, p1.pid, "all")
    records = [r for r in cluster.sim.trace.records
               if r["kind"] in ("clear-entry", "set-entry")]
    per_frame = {}
    for i, r in enumerate(records):
        per_frame.setdefault((r["actor"], r["frame"]), []).append((i, r["kind"], r["pid"]))
    for events in per_frame.values():
        kinds = [k for _, k, _ in events]
        # set (alloc), then clear (steal) strictly before the new set
        assert kinds == ["set-entry", "clear-entry", "set-entry"]


def test_steal_preserves_frame_digest(mmu_rig):
    cluster, mmu, p1, p2 = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    cluster.racks[0].memory[0].poke_frame(0, 100, b"payload")
    cluster.register_group({p1.pid, p2.pid})
    mmu.steal(p2.pid, p1.pid, "all")
    records = [r for r in cluster.sim.trace.records
               if r["kind"] in ("clear-entry", "set-entry") and r["frame"] == 0]
    digests = [r["digest"] for r in records[-2:]]  # steal's clear + set
    assert digests[0] == digests[1]


def test_translate_permission_absent(mmu_rig):
    cluster, mmu, p1, _ = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    mmu.table_for(p1.pid).entries[cluster.addressing.vpage(va)].perms = ""
    with pytest.raises(MmuError) as err:
        mmu.translate(p1.pid, va)
    assert err.value.code == "permission-absent"


def test_duplicate_pages_in_grant_collapse(mmu_rig):
    _, mmu, p1, p2 = mmu_rig
    [va] = mmu.allocate(p1.pid, 1)
    moved = mmu.grant(p1.pid, [va, va], p2.pid)
    assert len(moved) == 1


def test_restricted_topology_blocks_allocation(make_cluster):
    from ddcsim.mmu import Topology
    from ddcsim.cluster import Cluster
    from ddcsim.latency import profile
    cluster = Cluster(profile("current"), monitor_enabled=False)
    topo = Topology(links={("r0.c0", "r0.m0")})
    cluster.add_rack(2, 2, 4, topo)
    p_linked = cluster.spawn(0, lambda pid, os: Probe(pid, os), element_id="r0.c0")
    p_cut = cluster.spawn(0, lambda pid, os: Probe(pid, os), element_id="r0.c1")
    mmu = cluster.racks[0].mmu
    assert mmu.allocate(p_linked.pid, 1)
    with pytest.raises(MmuError) as err:
        mmu.allocate(p_cut.pid, 1)
    assert err.value.code == "no-reachable-element"
    # grants to a process that cannot reach the frames are refused too
    [va] = mmu.allocate(p_linked.pid, 1)
    with pytest.raises(MmuError) as err:
        mmu.grant(p_linked.pid, [va], p_cut.pid)
    assert err.value.code == "no-reachable-element"
