import itertools

import pytest

from culsim.cache import (
    CacheModel,
    ConfigError,
    Install,
    NeedsMiss,
    RequesterId,
    Retry,
    Served,
    arbitrate,
    set_word,
    word_at,
)
from culsim.protocol import (
    CoherentKind,
    CoreOp,
    LineState,
    OpKind,
    SnoopRequest,
    flags_of_state,
)

M, O, E, S, I = (
    LineState.MODIFIED,
    LineState.OWNED,
    LineState.EXCLUSIVE,
    LineState.SHARED,
    LineState.INVALID,
)

PRIORITY = [
    RequesterId.MISS_HANDLER,
    RequesterId.SNOOP_CTRL,
    RequesterId.PTW,
    RequesterId.LOAD_UNIT,
    RequesterId.ACCELERATOR,
    RequesterId.STORE_UNIT,
]


def make_cache(**kw):
    kw.setdefault("core_id", 0)
    kw.setdefault("line_size", 16)
    kw.setdefault("cache_size", 256)  # 4 sets x 4 ways for quick eviction tests
    kw.setdefault("ways", 4)
    return CacheModel(**kw)


def fill(cache, address, state, byte=0xAB, icache=False):
    data = bytes([byte]) * cache.line_size
    cache._install(cache.line_addr(address), state, data, icache=icache)
    return data


# -- arbitration ---------------------------------------------------------------

def test_arbitrate_all_pairs_respect_priority():
    for a, b in itertools.combinations(PRIORITY, 2):
        assert arbitrate({a, b}) is a
        assert arbitrate({b, a}) is a


def test_arbitrate_examples():
    assert arbitrate({RequesterId.MISS_HANDLER, RequesterId.STORE_UNIT}) is RequesterId.MISS_HANDLER
    assert arbitrate({RequesterId.SNOOP_CTRL, RequesterId.PTW, RequesterId.LOAD_UNIT}) is RequesterId.SNOOP_CTRL
    assert arbitrate({RequesterId.STORE_UNIT}) is RequesterId.STORE_UNIT
    assert arbitrate(set(PRIORITY)) is RequesterId.MISS_HANDLER


def test_arbitrate_rejects_empty():
    with pytest.raises(ValueError):
        arbitrate(set())


# -- lookup ----------------------------------------------------------------------

def test_lookup_empty_cache_misses():
    assert make_cache().lookup(0x40) is None


def test_lookup_after_install_hits():
    cache = make_cache()
    fill(cache, 0x40, S)
    way, line = cache.lookup(0x40)
    assert line.state is S
    assert cache.lookup(0x40 + cache.line_size) is None  # different line


def test_lookup_out_of_range_is_config_error():
    with pytest.raises(ConfigError):
        make_cache().lookup(1 << 32)


# -- core access -------------------------------------------------------------------

def test_store_hit_on_exclusive_turns_modified():
    cache = make_cache()
    fill(cache, 0x40, E)
    result = cache.core_access(CoreOp(OpKind.STORE, 0x44, value=0xDEAD))
    assert result == Served()
    line = cache.lookup(0x40)[1]
    assert line.state is M
    assert flags_of_state(line.state) == (1, 0, 1)
    assert word_at(line.data, 4) == 0xDEAD


def test_load_miss_issues_read_shared():
    cache = make_cache()
    result = cache.core_access(CoreOp(OpKind.LOAD, 0x40), now=3)
    assert result == NeedsMiss(CoherentKind.READ_SHARED)
    assert cache.miss.address == 0x40
    assert cache.miss.waiting_since == 3
    assert not cache.miss.unique_sought


def test_store_hit_on_shared_needs_clean_unique():
    cache = make_cache()
    fill(cache, 0x40, S)
    result = cache.core_access(CoreOp(OpKind.STORE, 0x40, value=1))
    assert result == NeedsMiss(CoherentKind.CLEAN_UNIQUE)
    assert cache.miss.unique_sought


def test_load_hit_returns_word():
    cache = make_cache()
    data = fill(cache, 0x40, E, byte=0x11)
    got = cache.core_access(CoreOp(OpKind.LOAD, 0x48))
    assert got == Served(word_at(data, 8))


def test_second_outstanding_miss_is_rejected():
    cache = make_cache()
    cache.core_access(CoreOp(OpKind.LOAD, 0x40))
    with pytest.raises(RuntimeError):
        cache.core_access(CoreOp(OpKind.LOAD, 0x80))


# -- snoop handling -----------------------------------------------------------------

def test_snoop_miss_transfers_nothing():
    cache = make_cache()
    resp, data = cache.handle_snoop(SnoopRequest(CoherentKind.READ_SHARED, 0x40))
    assert resp.data_transfer == 0 and data is None
    assert cache.miss is None


def test_snoop_read_unique_invalidates_and_hands_dirty_off():
    cache = make_cache()
    filled = fill(cache, 0x40, M)
    resp, data = cache.handle_snoop(SnoopRequest(CoherentKind.READ_UNIQUE, 0x40))
    assert (resp.data_transfer, resp.pass_dirty) == (1, 1)
    assert data.to_line() == filled
    assert len(data.beats) == cache.line_size // 4
    assert cache.lookup(0x40) is None


def test_snoop_invalidation_flags_pending_miss():
    cache = make_cache()
    fill(cache, 0x40, S)
    cache.core_access(CoreOp(OpKind.STORE, 0x40, value=1))  # pending CleanUnique
    cache.handle_snoop(SnoopRequest(CoherentKind.READ_UNIQUE, 0x40))
    assert cache.lookup(0x40) is None
    assert cache.miss.invalidated_by_snoop


def test_snoop_read_flags_pending_unique_miss():
    cache = make_cache()
    cache.core_access(CoreOp(OpKind.STORE, 0x40, value=1))  # pending ReadUnique
    cache.handle_snoop(SnoopRequest(CoherentKind.READ_SHARED, 0x40))
    assert cache.miss.snoop_read_seen


def test_snoop_read_does_not_flag_plain_load_miss():
    cache = make_cache()
    cache.core_access(CoreOp(OpKind.LOAD, 0x40))
    cache.handle_snoop(SnoopRequest(CoherentKind.READ_SHARED, 0x40))
    assert not cache.miss.snoop_read_seen


def test_stored_flags_match_protocol_next_state():
    for state in (M, O, E, S):
        for kind in (CoherentKind.READ_SHARED, CoherentKind.READ_UNIQUE):
            cache = make_cache()
            fill(cache, 0x40, state)
            cache.handle_snoop(SnoopRequest(kind, 0x40))
            hit = cache.lookup(0x40)
            from culsim.protocol import snoopee_transition

            expected = snoopee_transition(state, kind)[0]
            got = hit[1].state if hit else I
            assert got is expected


# -- miss completion -----------------------------------------------------------------

def test_clean_completion_installs():
    cache = make_cache()
    cache.core_access(CoreOp(OpKind.LOAD, 0x40))
    result = cache.miss_complete(S, bytes(16))
    assert isinstance(result, Install)
    assert cache.lookup(0x40)[1].state is S
    assert cache.miss is None


def test_clean_unique_completion_with_invalidation_retries_as_read_unique():
    cache = make_cache()
    fill(cache, 0x40, S)
    cache.core_access(CoreOp(OpKind.STORE, 0x40, value=1))
    cache.handle_snoop(SnoopRequest(CoherentKind.READ_UNIQUE, 0x40))
    result = cache.miss_complete(M, None)
    assert result == Retry(CoherentKind.READ_UNIQUE)
    assert cache.miss.kind is CoherentKind.READ_UNIQUE
    assert not cache.miss.invalidated_by_snoop  # flags reset for the retry


def test_read_unique_completion_with_snoop_read_retries():
    cache = make_cache()
    cache.core_access(CoreOp(OpKind.STORE, 0x40, value=1))
    cache.handle_snoop(SnoopRequest(CoherentKind.READ_SHARED, 0x40))
    result = cache.miss_complete(M, bytes(16))
    assert result == Retry(CoherentKind.READ_UNIQUE)


def test_clean_unique_completion_upgrades_in_place():
    cache = make_cache()
    data = fill(cache, 0x40, S, byte=0x3C)
    cache.core_access(CoreOp(OpKind.STORE, 0x40, value=1))
    result = cache.miss_complete(M, None)
    assert isinstance(result, Install)
    line = cache.lookup(0x40)[1]
    assert line.state is M
    assert line.data == data  # store value applied separately


def test_take_dirty_responsibility_promotes_clean_copy():
    cache = make_cache()
    fill(cache, 0x40, S)
    cache.take_dirty_responsibility(0x40)
    assert cache.lookup(0x40)[1].state is O
    cache.take_dirty_responsibility(0x80)  # no copy: no-op


# -- eviction -------------------------------------------------------------------------

def set_addresses(cache, set_idx):
    # addresses mapping to one set: stride = n_sets * line_size
    stride = cache.n_sets * cache.line_size
    return [set_idx * cache.line_size + k * stride for k in range(cache.ways + 1)]


def test_evict_skips_sets_with_free_ways():
    cache = make_cache()
    fill(cache, 0x40, S)
    set_idx, _ = cache._index_tag(0x40)
    assert cache.evict(set_idx) is None  # invalid way still available


def test_evict_clean_victim_produces_no_writeback():
    cache = make_cache()
    addrs = set_addresses(cache, 0)
    for a in addrs[: cache.ways]:
        fill(cache, a, S)
    assert cache.evict(0) is None  # clean victim: nothing to write back
    valid = [a for a, _ in cache.valid_lines()]
    assert len(valid) == cache.ways - 1  # but the victim is gone


def test_evict_dirty_victim_emits_writeback():
    cache = make_cache()
    addrs = set_addresses(cache, 1)
    victims = []
    for a in addrs[: cache.ways]:
        victims.append(fill(cache, a, O))
    wb = cache.evict(1)
    assert wb is not None
    addr, data = wb
    assert addr in addrs
    assert data == victims[0]


def test_install_into_full_set_evicts_round_robin():
    cache = make_cache()
    addrs = set_addresses(cache, 2)
    for a in addrs[: cache.ways]:
        fill(cache, a, M, byte=0x55)
    cache.core_access(CoreOp(OpKind.LOAD, addrs[cache.ways]))
    result = cache.miss_complete(E, bytes(16))
    assert result.writeback is not None
    assert result.evicted == result.writeback[0]
    assert cache.lookup(addrs[cache.ways]) is not None


# -- instruction cache ---------------------------------------------------------------

def test_noncoherent_ifetch_misses_with_read_no_snoop():
    cache = make_cache(coherent_ifetch=False)
    result = cache.ifetch(0x40)
    assert result == NeedsMiss(CoherentKind.READ_NO_SNOOP)
    assert cache.miss.for_icache


def test_coherent_ifetch_misses_with_read_once():
    cache = make_cache(coherent_ifetch=True)
    assert cache.ifetch(0x40) == NeedsMiss(CoherentKind.READ_ONCE)


def test_ifetch_hit_serves_without_traffic():
    cache = make_cache(coherent_ifetch=True)
    data = fill(cache, 0x40, S, byte=0x77, icache=True)
    assert cache.ifetch(0x44) == Served(word_at(data, 4))
    assert cache.miss is None


def test_coherent_icache_lines_only_shared_or_invalid():
    cache = make_cache(coherent_ifetch=True)
    cache.ifetch(0x40)
    cache.miss_complete(S, bytes([1]) * 16)
    for _addr, line in cache.valid_lines(icache=True):
        assert line.state is S
    cache.handle_snoop(
        SnoopRequest(CoherentKind.READ_UNIQUE, 0x40), probe_dcache=False, probe_icache=True
    )
    assert cache.lookup(0x40, icache=True) is None


def test_snoop_probes_merge_dcache_and_icache():
    cache = make_cache(coherent_ifetch=True)
    fill(cache, 0x40, S, icache=True)
    resp, data = cache.handle_snoop(
        SnoopRequest(CoherentKind.READ_SHARED, 0x40), probe_dcache=True, probe_icache=True
    )
    assert resp.is_shared == 1 and resp.data_transfer == 1
    assert data is not None


# -- helpers ---------------------------------------------------------------------------

def test_word_helpers_round_trip():
    line = bytes(range(16))
    updated = set_word(line, 4, 0xA1B2C3D4)
    assert word_at(updated, 4) == 0xA1B2C3D4
    assert word_at(updated, 0) == word_at(line, 0)
    assert len(updated) == 16
