"""Undo-log arena: layout, transactions, recovery, crash sweeps.

The sequential oracle used throughout is a plain dict replay of committed
transactions; it never touches arena code.
"""

import random

import pytest

from ddcsim.addressing import AddressConfig
from ddcsim.ccheap import (Arena, ArenaError, LocalStore, op_recover,
                           parse_header, parse_log)
from ddcsim.units import us

from conftest import Probe, Script, run

CFG = AddressConfig()
KEYS = [f"k{i}" for i in range(8)]
VAL = 16  # bytes per key slot


def fresh_store(n_pages=4, log_pages=1, pid=1):
    store = LocalStore(CFG)
    pages = [CFG.vaddr(pid, i) for i in range(n_pages)]
    store.add_pages(pages)
    arena = Arena(CFG, pages, log_pages)
    store.drive(arena.op_format())
    return store, arena


def setup_slots(store, arena):
    addrs = {k: arena.alloc(VAL) for k in KEYS}
    store.drive(arena.op_tx([], roots=[(k, addrs[k]) for k in KEYS]))
    return addrs


def recover_fresh(store):
    ok, result = store.drive(op_recover(CFG, list(store.pages)))
    assert ok
    status, arena = result
    assert status == "ok", status
    return arena


def oracle_state(txs, committed_count):
    state = {k: b"\0" * VAL for k in KEYS}
    for writes in txs[:committed_count]:
        for key, value in writes:
            state[key] = value.ljust(VAL, b"\0")
    return state


def read_slots(store, arena):
    return {k: store.read(arena.get_root(k), VAL) for k in KEYS}


def make_workload(seed, n_tx):
    rng = random.Random(seed)
    txs = []
    for _ in range(n_tx):
        writes = [(rng.choice(KEYS), rng.randbytes(rng.randint(1, VAL)))
                  for _ in range(rng.randint(1, 3))]
        txs.append(writes)
    return txs


def run_workload(txs, crash_after=None, defect=None):
    store, arena = fresh_store()
    addrs = setup_slots(store, arena)
    arena.defect = defect
    setup_markers = store.marker_writes
    for writes in txs:
        gen = arena.op_tx([(addrs[k], v.ljust(VAL, b"\0")) for k, v in writes])
        finished, _ = store.drive(gen, crash_after=crash_after)
        if not finished:
            break
    return store, arena, setup_markers


def test_empty_tx_leaves_bytes_unchanged():
    store, arena = fresh_store()
    setup_slots(store, arena)
    before = {base: bytes(buf) for base, buf in store.pages.items()}
    store.drive(arena.op_tx([]))
    after = {base: bytes(buf) for base, buf in store.pages.items()}
    # only the log and generation moved; data and roots identical
    data_pages = [arena.addressing.page_base(arena.data_vaddr(0))]
    for base in data_pages:
        assert before[base] == after[base]


def test_write_read_via_tx():
    store, arena = fresh_store()
    addrs = setup_slots(store, arena)
    store.drive(arena.op_tx([(addrs["k0"], b"hello".ljust(VAL, b"\0"))]))
    assert store.read(addrs["k0"], 5) == b"hello"


def test_recover_clean_arena_identical_bytes_empty_log():
    txs = make_workload(7, 5)
    store, arena, _ = run_workload(txs)
    before = {base: bytes(buf) for base, buf in store.pages.items()}
    recovered = recover_fresh(store)
    # data bytes untouched; only the generation word differs
    for base, raw in store.pages.items():
        if base == CFG.page_base(arena.pages[0]):
            continue
        assert raw == before[base]
    records, _ = parse_log(store.read(recovered.log_vaddr(0),
                                      recovered.log_capacity),
                           recovered.generation, CFG.page_size)
    assert records == []
    assert recovered.roots.keys() == arena.roots.keys()


def test_recover_is_idempotent():
    txs = make_workload(3, 10)
    store, _, _ = run_workload(txs, crash_after=40)
    recover_fresh(store)
    once = {base: bytes(buf) for base, buf in store.pages.items()}
    arena = recover_fresh(store)
    twice = {base: bytes(buf) for base, buf in store.pages.items()}
    gen_page = CFG.page_base(arena.pages[0])
    for base in once:
        if base != gen_page:
            assert once[base] == twice[base]
    assert read_slots(store, arena) == read_slots(store, arena)


def test_crash_between_undo_append_and_data_write_restores_old():
    store, arena = fresh_store()
    addrs = setup_slots(store, arena)
    store.drive(arena.op_tx([(addrs["k0"], b"old-value".ljust(VAL, b"\0"))]))
    base = store.writes_applied
    # tx steps: bump not dirty; [record append, data write, marker, truncate]
    gen = arena.op_tx([(addrs["k0"], b"new-value".ljust(VAL, b"\0"))])
    finished, _ = store.drive(gen, crash_after=base + 1)
    assert not finished
    recovered = recover_fresh(store)
    assert store.read(recovered.get_root("k0"), 9) == b"old-value"


def test_crash_after_commit_marker_keeps_new():
    store, arena = fresh_store()
    addrs = setup_slots(store, arena)
    base = store.writes_applied
    gen = arena.op_tx([(addrs["k0"], b"durable".ljust(VAL, b"\0"))])
    # steps: record, data, marker -> crash before truncate
    finished, _ = store.drive(gen, crash_after=base + 3)
    assert not finished
    recovered = recover_fresh(store)
    assert store.read(recovered.get_root("k0"), 7) == b"durable"


def test_crash_sweep_fifty_tx_matches_oracle_prefix():
    txs = make_workload(42, 50)
    full_store, _, setup_markers = run_workload(txs)
    total = full_store.writes_applied
    start = run_workload([])[0].writes_applied  # setup-only segment count
    for crash_after in range(start, total + 1):
        store, _, _ = run_workload(txs, crash_after=crash_after)
        arena = recover_fresh(store)
        committed = store.marker_writes - setup_markers
        assert read_slots(store, arena) == oracle_state(txs, committed), (
            f"divergence at crash point {crash_after}")


def test_data_before_log_defect_is_detected_by_sweep():
    txs = [[("k0", b"poison")]]
    diverged = False
    start = run_workload([])[0].writes_applied
    full_store, _, setup_markers = run_workload(txs, defect="data-before-log")
    for crash_after in range(start, full_store.writes_applied + 1):
        store, _, _ = run_workload(txs, crash_after=crash_after,
                                   defect="data-before-log")
        arena = recover_fresh(store)
        committed = store.marker_writes - setup_markers
        if read_slots(store, arena) != oracle_state(txs, committed):
            diverged = True
            break
    assert diverged


def test_root_update_crash_swept_old_or_new_never_garbage():
    store, arena = fresh_store()
    addrs = setup_slots(store, arena)
    other = arena.alloc(VAL)
    store.drive(arena.op_tx([]))  # persist the bump
    base = store.writes_applied
    marker_base = store.marker_writes
    total_gen = arena.op_set_root("k0", other)
    finished, _ = store.drive(total_gen)
    total = store.writes_applied
    for crash_after in range(base, total + 1):
        s2, a2 = fresh_store()
        ad2 = setup_slots(s2, a2)
        o2 = a2.alloc(VAL)
        s2.drive(a2.op_tx([]))
        f2, _ = s2.drive(a2.op_set_root("k0", o2), crash_after=crash_after)
        rec = recover_fresh(s2)
        expected = o2 if s2.marker_writes > marker_base else ad2["k0"]
        assert rec.get_root("k0") == expected


def test_get_unknown_root():
    _, arena = fresh_store()
    with pytest.raises(ArenaError) as err:
        arena.get_root("nope")
    assert err.value.code == "unknown-root"


def test_root_name_length_limit():
    store, arena = fresh_store()
    with pytest.raises(ArenaError) as err:
        store.drive(arena.op_set_root("x" * 25, arena.data_vaddr(0)))
    assert err.value.code == "root-name-too-long"


def test_corrupt_arena_bad_magic():
    store, arena = fresh_store()
    store.write(arena.pages[0], b"XXXX")
    ok, (status, result) = store.drive(op_recover(CFG, list(store.pages)))
    assert status == "corrupt-arena" and result is None


def test_large_write_spans_records_and_rolls_back():
    store, arena = fresh_store(n_pages=6, log_pages=2)
    addr = arena.alloc(3000)
    store.drive(arena.op_tx([]))
    payload = bytes(range(256)) * 12  # 3072 > WRITE_CHUNK
    store.drive(arena.op_tx([(addr, payload[:3000])]))
    assert store.read(addr, 3000) == payload[:3000]
    base = store.writes_applied
    gen = arena.op_tx([(addr, bytes(3000))])
    # crash after two of the three record/data pairs
    finished, _ = store.drive(gen, crash_after=base + 4)
    assert not finished
    recover_fresh(store)
    assert store.read(addr, 3000) == payload[:3000]


def test_log_page_boundary_pad():
    store, arena = fresh_store(n_pages=7, log_pages=2)
    addrs = [arena.alloc(64) for _ in range(2)]
    store.drive(arena.op_tx([]))
    # one tx with enough records to cross the first log page
    writes = [(addrs[i % 2], bytes([i]) * 64) for i in range(40)]
    store.drive(arena.op_tx(writes))
    for i in (38, 39):
        assert store.read(addrs[i % 2], 64) == bytes([i]) * 64
    # sweep the same tx: every crash point rolls back to the previous state
    full = store.writes_applied
    s2, a2 = fresh_store(n_pages=7, log_pages=2)
    addrs2 = [a2.alloc(64) for _ in range(2)]
    s2.drive(a2.op_tx([]))
    base = s2.writes_applied
    for crash_after in range(base, base + (full - base), 7):
        s3, a3 = fresh_store(n_pages=7, log_pages=2)
        addrs3 = [a3.alloc(64) for _ in range(2)]
        s3.drive(a3.op_tx([]))
        writes3 = [(addrs3[i % 2], bytes([i]) * 64) for i in range(40)]
        finished, _ = s3.drive(a3.op_tx(writes3), crash_after=crash_after)
        rec = recover_fresh(s3)
        if finished or s3.marker_writes > 1:
            assert s3.read(addrs3[0], 64) == bytes([38]) * 64
        else:
            assert s3.read(addrs3[0], 64) == bytes(64)
            assert s3.read(addrs3[1], 64) == bytes(64)


def test_log_full_raises():
    store, arena = fresh_store(n_pages=4, log_pages=1)
    addr = arena.alloc(VAL)
    store.drive(arena.op_tx([]))
    writes = [(addr, bytes([i % 256]) * VAL) for i in range(200)]
    with pytest.raises(ArenaError) as err:
        store.drive(arena.op_tx(writes))
    assert err.value.code == "log-full"


def test_header_roundtrip_through_parser():
    store, arena = fresh_store()
    addrs = setup_slots(store, arena)
    raw = store.read(arena.pages[0], CFG.page_size)
    n_pages, log_pages, generation, bump, roots, pages = parse_header(raw, CFG)
    assert n_pages == 4 and log_pages == 1
    assert generation == arena.generation
    assert bump == arena.bump
    assert {n: v for n, (_s, v) in roots.items()} == {
        n: v for n, (_s, v) in arena.roots.items()}
    assert pages == arena.pages


def test_steal_then_recover_cross_process(make_cluster):
    """set_root, steal the arena, recover by the thief, get_root -> value."""
    cluster = make_cluster(frames=8, monitor_enabled=False)
    p1 = cluster.spawn(0, lambda pid, os: Probe(pid, os), element_id="r0.c0")
    p2 = cluster.spawn(0, lambda pid, os: Probe(pid, os), element_id="r0.c1")
    script = Script(cluster.sim)
    mmu = cluster.racks[0].mmu
    pages = mmu.allocate(p1.pid, 4)
    cluster.register_group({p1.pid, p2.pid})
    arena = Arena(cluster.addressing, pages, log_pages=1)
    state = {}

    def fmt():
        p1.os.start_op(p1.pid, arena.op_format(), lambda _: state.update(fmt=True))

    def seed(_):
        slot = arena.alloc(VAL)
        state["slot"] = slot
        p1.os.start_op(
            p1.pid,
            arena.op_tx([(slot, b"replica root".ljust(VAL, b"\0"))],
                        roots=[("log_head", slot)]),
            lambda _: state.update(seeded=True))

    script.at(0, fmt)
    script.at(us(100), lambda: seed(None))
    script.at(us(400), lambda: cluster.crash_compute("r0.c0"))
    script.at(us(410), lambda: p2.os.sys_steal(p2.pid, p1.pid, "all", None))

    def on_added(sig):
        gen = op_recover(cluster.addressing, list(sig.detail["vaddrs"]))
        p2.os.start_op(p2.pid, gen, lambda res: state.update(recover=res))

    p2.signal_handlers["page-added"] = on_added
    run(cluster, 2000)
    status, recovered = state["recover"]
    assert status == "ok"
    assert recovered.get_root("log_head") == state["slot"]
    got = {}
    p2.os.read(p2.pid, recovered.get_root("log_head"), VAL, lambda d: got.update(d=d))
    cluster.sim.run_until(cluster.sim.now + us(10))
    assert got["d"].rstrip(b"\0") == b"replica root"


def test_explicit_tx_begin_write_commit_steps():
    store, arena = fresh_store()
    addrs = setup_slots(store, arena)
    txid = arena.tx_begin()
    assert txid == arena.active_tx
    store.drive(arena.op_tx_write(addrs["k0"], b"stepwise".ljust(VAL, b"\0")))
    store.drive(arena.op_tx_commit())
    assert arena.active_tx is None
    assert store.read(addrs["k0"], 8) == b"stepwise"
    with pytest.raises(ArenaError) as err:
        store.drive(arena.op_tx_write(addrs["k0"], b"x"))
    assert err.value.code == "no-open-tx"


def test_double_tx_begin_rejected():
    _, arena = fresh_store()
    arena.tx_begin()
    with pytest.raises(ArenaError) as err:
        arena.tx_begin()
    assert err.value.code == "tx-already-open"
