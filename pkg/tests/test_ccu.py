import pytest

from culsim.ccu import (
    Ccu,
    CollisionTable,
    CrOrderFifo,
    Path,
    ProtocolFault,
    decode_and_snoop,
    mux_grant,
    route,
)
from culsim.memsys import MemoryModel
from culsim.protocol import CoherentKind, SnoopResponse

RS, RU, CU, RO = (
    CoherentKind.READ_SHARED,
    CoherentKind.READ_UNIQUE,
    CoherentKind.CLEAN_UNIQUE,
    CoherentKind.READ_ONCE,
)


# -- routing -------------------------------------------------------------------

def test_route_noncoherent_to_memory():
    assert route(CoherentKind.WRITE_NO_SNOOP) is Path.MEMORY
    assert route(CoherentKind.READ_NO_SNOOP) is Path.MEMORY
    assert route(CoherentKind.WRITE_BACK) is Path.MEMORY  # own eviction, never snooped


def test_route_coherent_kinds():
    for kind in (RS, RU, CU, RO):
        assert route(kind) is Path.COHERENT


# -- mux ------------------------------------------------------------------------

def test_mux_same_cycle_tie_rotates_after_last_granted():
    assert mux_grant({0: 5, 1: 5}, last_granted=0, n_cores=2) == 1
    assert mux_grant({0: 5, 1: 5}, last_granted=1, n_cores=2) == 0


def test_mux_single_pending():
    assert mux_grant({1: 9}, last_granted=0, n_cores=2) == 1


def test_mux_earliest_arrival_wins():
    assert mux_grant({0: 5, 1: 3}, last_granted=1, n_cores=2) == 1


def test_mux_rejects_empty():
    with pytest.raises(ValueError):
        mux_grant({}, 0, 2)


def test_round_robin_fairness_under_continuous_pending():
    n = 4
    arrivals = {c: 0 for c in range(n)}
    counts = [0] * n
    last = n - 1
    for t in range(1000):
        winner = mux_grant(arrivals, last, n)
        counts[winner] += 1
        last = winner
        arrivals[winner] = t + 1  # re-request immediately
    assert max(counts) - min(counts) <= 1


def test_round_robin_fairness_equal_arrivals():
    n = 3
    counts = [0] * n
    last = n - 1
    for _ in range(1000):
        winner = mux_grant({c: 7 for c in range(n)}, last, n)
        counts[winner] += 1
        last = winner
    assert max(counts) - min(counts) <= 1


# -- collision table ----------------------------------------------------------------

def test_collision_empty_proceeds_and_inserts():
    table = CollisionTable()
    assert table.check(0x40)
    assert 0x40 in table.entries


def test_collision_same_line_stalls():
    table = CollisionTable(line_size=16)
    table.check(0x40)
    assert not table.check(0x40)
    assert not table.check(0x44)  # same 16-byte line


def test_collision_distinct_lines_proceed():
    table = CollisionTable(line_size=16)
    table.check(0x40)
    assert table.check(0x50)


def test_collision_full_table_stalls():
    table = CollisionTable(capacity=2)
    assert table.check(0x00) and table.check(0x10)
    assert not table.check(0x20)
    table.release(0x00)
    assert table.check(0x20)


# -- CR order fifo --------------------------------------------------------------------

def test_cr_fifo_matches_in_order():
    fifo = CrOrderFifo(2)
    fifo.push(1, 7)
    fifo.push(1, 8)
    assert fifo.pop(1) == 7
    assert fifo.pop(1) == 8


def test_cr_with_empty_fifo_is_protocol_fault():
    with pytest.raises(ProtocolFault):
        CrOrderFifo(2).pop(0)


# -- snoop fan-out ----------------------------------------------------------------------

def test_dual_core_fanout_excludes_initiator():
    fanout = decode_and_snoop(0, RU, 0x40, n_cores=2, coherent_ifetch=False)
    assert [(c, pd, pi) for c, _r, pd, pi in fanout] == [(1, True, False)]


def test_quad_core_fanout():
    fanout = decode_and_snoop(2, RS, 0x40, n_cores=4, coherent_ifetch=False)
    assert [c for c, _r, _pd, _pi in fanout] == [0, 1, 3]


def test_coherent_ifetch_probes_sibling_icache():
    fanout = decode_and_snoop(0, RU, 0x40, n_cores=2, coherent_ifetch=True)
    assert [(c, pd, pi) for c, _r, pd, pi in fanout] == [(0, False, True), (1, True, True)]


def test_read_once_probes_own_dcache():
    fanout = decode_and_snoop(
        1, RO, 0x40, n_cores=2, coherent_ifetch=True, from_icache=True
    )
    assert [(c, pd, pi) for c, _r, pd, pi in fanout] == [(0, True, True), (1, True, False)]


# -- engine-level behavior -----------------------------------------------------------------

def make_ccu(**kw):
    kw.setdefault("n_cores", 2)
    kw.setdefault("line_size", 16)
    kw.setdefault("coherent_ifetch", False)
    return Ccu(**kw)


def test_decoder_pipelines_distinct_lines():
    ccu = make_ccu()
    ccu.submit(0, RS, 0x40, now=0)
    ccu.submit(1, RS, 0x80, now=0)
    t0 = ccu.decoder_step(0)
    t1 = ccu.decoder_step(1)
    assert t0 is not None and t1 is not None
    assert len(ccu.txns) == 2  # both in flight simultaneously


def test_decoder_serializes_same_line():
    ccu = make_ccu(n_cores=3)
    ccu.submit(0, RS, 0x40, now=0)
    ccu.submit(1, RU, 0x40, now=0)
    first = ccu.decoder_step(0)
    assert first is not None
    assert ccu.decoder_step(1) is None  # collision holds the second
    assert ccu.collision_stalls >= 1
    ccu.finish(first.id)
    assert ccu.decoder_step(2) is not None


def test_serialize_mode_admits_one_transaction_at_a_time():
    ccu = make_ccu(serialize=True)
    ccu.submit(0, RS, 0x40, now=0)
    ccu.submit(1, RS, 0x80, now=0)
    first = ccu.decoder_step(0)
    assert first is not None
    assert ccu.decoder_step(1) is None
    ccu.finish(first.id)
    assert ccu.decoder_step(2) is not None


def test_collect_cr_first_responder_supplies_data():
    ccu = make_ccu(n_cores=3)
    ccu.submit(0, RS, 0x40, now=0)
    txn = ccu.decoder_step(0)
    line_a, line_b = bytes([1]) * 16, bytes([2]) * 16
    ccu.collect_cr(1, SnoopResponse(data_transfer=1, is_shared=1), line_a)
    ccu.collect_cr(2, SnoopResponse(data_transfer=1, is_shared=1), line_b)
    assert txn.data == line_a
    assert txn.data_source == 1
    assert txn.any_is_shared == 1 and txn.any_pass_dirty == 0


def test_collect_cr_aggregates_with_or_semantics():
    ccu = make_ccu(n_cores=3)
    ccu.submit(0, RU, 0x40, now=0)
    txn = ccu.decoder_step(0)
    ccu.collect_cr(1, SnoopResponse(), None)
    ccu.collect_cr(2, SnoopResponse(data_transfer=1, pass_dirty=1), bytes(16))
    assert txn.any_pass_dirty == 1
    assert txn.cr_pending == 0


def test_collect_cr_all_deny_leaves_no_source():
    ccu = make_ccu(n_cores=3)
    ccu.submit(0, RS, 0x40, now=0)
    txn = ccu.decoder_step(0)
    ccu.collect_cr(1, SnoopResponse(), None)
    ccu.collect_cr(2, SnoopResponse(), None)
    assert txn.data_source is None and txn.data is None


def test_unmatched_cr_is_protocol_fault():
    ccu = make_ccu()
    with pytest.raises(ProtocolFault):
        ccu.collect_cr(1, SnoopResponse(), None)


def test_writeback_fifo_drains_in_order():
    ccu = make_ccu()
    mem = MemoryModel(16, 1, 1)
    a, b = bytes([3]) * 16, bytes([4]) * 16
    assert ccu.push_writeback(0x40, a)
    assert ccu.push_writeback(0x80, b)
    ccu.memory_unit_step(0, mem)
    assert mem.contents.get(0x40) == a and 0x80 not in mem.contents
    ccu.memory_unit_step(1, mem)
    assert mem.contents.get(0x80) == b


def test_writeback_fifo_backpressures_when_full():
    ccu = make_ccu(wb_depth=1)
    assert ccu.push_writeback(0x40, bytes(16))
    assert not ccu.push_writeback(0x80, bytes(16))  # caller must stall


def test_memory_reads_wait_for_same_line_writeback():
    ccu = make_ccu()
    mem = MemoryModel(16, 1, 1)
    ccu.push_writeback(0x40, bytes([9]) * 16)
    ccu.submit(0, CoherentKind.READ_NO_SNOOP, 0x40, now=0)
    ccu.memory_unit_step(5, mem)
    assert mem.reads == 0 and mem.writes == 1  # drain first
    ccu.memory_unit_step(6, mem)
    assert mem.reads == 1
    _, _, data = mem.take_completions(10)[0]
    assert data == bytes([9]) * 16


def test_upgrade_pending_rewrites_before_acceptance_only():
    ccu = make_ccu()
    ccu.submit(0, CU, 0x40, now=0)
    assert ccu.upgrade_pending(0, RU)
    assert ccu.pending[0][1] is RU
    txn = ccu.decoder_step(0)
    assert txn.kind is RU
    assert not ccu.upgrade_pending(0, CU)  # already accepted
