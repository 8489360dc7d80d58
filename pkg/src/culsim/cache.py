"""L1 cache model: set-associative write-back data cache plus an optional
coherent instruction cache.

The data cache SRAM has a single read/write port shared by six
requesters under a fixed priority (arbitrate). The snoop controller sits
second so that coherency updates are served before core requests; it
also feeds the snoop-read and snoop-invalidation side signals into the
in-flight miss so completions that raced with a snoop are retried rather
than installed with stale uniqueness.

The instruction cache has its own port and only ever holds lines in
Shared or Invalid.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple, Union

from .protocol import (
    CoherentKind,
    CoreOp,
    Hit,
    LineState,
    OpKind,
    Port,
    SnoopData,
    SnoopRequest,
    SnoopResponse,
    UNIQUE_KINDS,
    initiator_action,
    snoopee_transition,
)

WORD_BYTES = 4
PHYS_ADDR_BITS = 32


class ConfigError(ValueError):
    """Bad geometry or out-of-range configuration value."""


class RequesterId(Enum):
    """SRAM-port requesters in priority order (lower value wins)."""

    MISS_HANDLER = 0
    SNOOP_CTRL = 1
    PTW = 2
    LOAD_UNIT = 3
    ACCELERATOR = 4
    STORE_UNIT = 5


_PORT_REQUESTER = {
    Port.PTW: RequesterId.PTW,
    Port.LOAD_UNIT: RequesterId.LOAD_UNIT,
    Port.ACCELERATOR: RequesterId.ACCELERATOR,
    Port.STORE_UNIT: RequesterId.STORE_UNIT,
}


def requester_for_port(port: Port) -> RequesterId:
    """Arbiter requester for a core-op port (the icache has its own port)."""
    return _PORT_REQUESTER[port]


def arbitrate(requests) -> RequesterId:
    """Pick the winning requester under the static priority order."""
    if not requests:
        raise ValueError("arbitrate requires at least one requester")
    return min(requests, key=lambda r: r.value)


def word_at(data: bytes, offset: int) -> int:
    off = offset & ~(WORD_BYTES - 1)
    return int.from_bytes(data[off : off + WORD_BYTES], "little")


def set_word(data: bytes, offset: int, value: int) -> bytes:
    off = offset & ~(WORD_BYTES - 1)
    word = (value & 0xFFFFFFFF).to_bytes(WORD_BYTES, "little")
    return data[:off] + word + data[off + WORD_BYTES :]


@dataclass
class CacheLine:
    tag: int = 0
    state: LineState = LineState.INVALID
    data: bytes = b""


@dataclass
class MissStatus:
    """The single outstanding miss of one core.

    snoop_read_seen rises when a read-class snoop touches the line while
    unique access is being sought; invalidated_by_snoop when a snoop
    invalidates the local copy under the in-flight request.
    """

    address: int
    kind: CoherentKind
    unique_sought: bool
    waiting_since: int
    for_icache: bool = False
    snoop_read_seen: bool = False
    invalidated_by_snoop: bool = False


@dataclass(frozen=True)
class Served:
    value: Optional[int] = None


@dataclass(frozen=True)
class NeedsMiss:
    kind: CoherentKind


@dataclass(frozen=True)
class Install:
    state: LineState
    writeback: Optional[Tuple[int, bytes]] = None
    evicted: Optional[int] = None  # line address of any victim, clean or dirty


@dataclass(frozen=True)
class Retry:
    kind: CoherentKind


class CacheModel:
    """One core's cache subsystem (data cache + optional coherent icache)."""

    def __init__(
        self,
        core_id: int,
        line_size: int = 16,
        cache_size: int = 8192,
        ways: int = 4,
        coherent_ifetch: bool = False,
    ):
        if cache_size % (ways * line_size) != 0:
            raise ConfigError("cache_size must be divisible by ways * line_size")
        self.core_id = core_id
        self.line_size = line_size
        self.ways = ways
        self.n_sets = cache_size // (ways * line_size)
        self.coherent_ifetch = coherent_ifetch
        self.sets: List[List[CacheLine]] = [
            [CacheLine() for _ in range(ways)] for _ in range(self.n_sets)
        ]
        self.isets: List[List[CacheLine]] = [
            [CacheLine() for _ in range(ways)] for _ in range(self.n_sets)
        ]
        self.rr: List[int] = [0] * self.n_sets
        self.irr: List[int] = [0] * self.n_sets
        self.miss: Optional[MissStatus] = None

    # -- address helpers ------------------------------------------------

    def line_addr(self, address: int) -> int:
        return address - (address % self.line_size)

    def _index_tag(self, address: int) -> Tuple[int, int]:
        line = address // self.line_size
        return line % self.n_sets, line // self.n_sets

    def _addr_of(self, set_idx: int, tag: int) -> int:
        return (tag * self.n_sets + set_idx) * self.line_size

    # -- lookup ----------------------------------------------------------

    def lookup(self, address: int, icache: bool = False) -> Optional[Tuple[int, CacheLine]]:
        """Find the valid way holding `address`, or None on miss."""
        if address < 0 or address >= (1 << PHYS_ADDR_BITS):
            raise ConfigError(f"address {address:#x} outside the physical address range")
        set_idx, tag = self._index_tag(address)
        ways = (self.isets if icache else self.sets)[set_idx]
        for way, line in enumerate(ways):
            if line.state.is_valid and line.tag == tag:
                return way, line
        return None

    # -- core side ---------------------------------------------------------

    def core_access(self, op: CoreOp, now: int = 0) -> Union[Served, NeedsMiss]:
        """Serve a load/store against the data cache or hand it to the miss
        handler. IFetch ops go through ifetch() instead."""
        if op.kind is OpKind.IFETCH:
            return self.ifetch(op.address, now)
        if self.miss is not None:
            raise RuntimeError(f"core {self.core_id}: second outstanding miss")
        hit = self.lookup(op.address)
        state = hit[1].state if hit else LineState.INVALID
        action = initiator_action(state, op.kind)
        if isinstance(action, Hit):
            line = hit[1]
            line.state = action.next
            if op.kind is OpKind.STORE:
                line.data = set_word(line.data, op.address % self.line_size, op.value)
                return Served()
            return Served(word_at(line.data, op.address % self.line_size))
        self._start_miss(action.kind, self.line_addr(op.address), now, for_icache=False)
        return NeedsMiss(action.kind)

    def ifetch(self, address: int, now: int = 0) -> Union[Served, NeedsMiss]:
        """Instruction fetch. Coherent icaches miss with ReadOnce and get
        snooped; non-coherent ones miss with ReadNoSnoop and stay out of
        the coherency domain."""
        hit = self.lookup(address, icache=True)
        if hit:
            return Served(word_at(hit[1].data, address % self.line_size))
        if self.miss is not None:
            raise RuntimeError(f"core {self.core_id}: second outstanding miss")
        kind = CoherentKind.READ_ONCE if self.coherent_ifetch else CoherentKind.READ_NO_SNOOP
        self._start_miss(kind, self.line_addr(address), now, for_icache=True)
        return NeedsMiss(kind)

    def _start_miss(self, kind: CoherentKind, address: int, now: int, for_icache: bool) -> None:
        self.miss = MissStatus(
            address=address,
            kind=kind,
            unique_sought=kind in UNIQUE_KINDS,
            waiting_since=now,
            for_icache=for_icache,
        )

    # -- snoop side --------------------------------------------------------

    def handle_snoop(
        self, req: SnoopRequest, probe_dcache: bool = True, probe_icache: bool = False
    ) -> Tuple[SnoopResponse, Optional[SnoopData]]:
        """Apply one AC probe to this core's cache subsystem; data leaves
        on the CD channel as word beats.

        Both structures may be probed (the snoop controller merges them
        into a single CR): pass_dirty can only come from the data cache,
        is_shared/data from either. Raises the side signals into the
        pending miss when the addresses match.
        """
        read_class = req.kind in (CoherentKind.READ_SHARED, CoherentKind.READ_ONCE)
        resp = SnoopResponse()
        data: Optional[bytes] = None
        invalidated = False

        if probe_dcache:
            hit = self.lookup(req.address)
            state = hit[1].state if hit else LineState.INVALID
            nxt, resp = snoopee_transition(state, req.kind)
            if hit:
                line = hit[1]
                if resp.data_transfer:
                    data = line.data
                if nxt is LineState.INVALID and state.is_valid:
                    invalidated = True
                line.state = nxt

        if probe_icache and self.coherent_ifetch:
            ihit = self.lookup(req.address, icache=True)
            istate = ihit[1].state if ihit else LineState.INVALID
            inxt, iresp = snoopee_transition(istate, req.kind)
            if ihit:
                if iresp.data_transfer and data is None:
                    data = ihit[1].data
                ihit[1].state = inxt
            resp = SnoopResponse(
                data_transfer=resp.data_transfer | iresp.data_transfer,
                pass_dirty=resp.pass_dirty,
                is_shared=resp.is_shared | iresp.is_shared,
            )

        ms = self.miss
        if ms is not None and ms.address == req.address:
            if read_class and ms.unique_sought:
                ms.snoop_read_seen = True
            if invalidated:
                ms.invalidated_by_snoop = True
        return resp, SnoopData.from_line(data) if data is not None else None

    # -- miss completion ----------------------------------------------------

    def needs_eviction(self) -> Optional[CacheLine]:
        """Victim that installing the pending miss would evict (None if a
        free way exists, the line is already present, or it's an icache
        fill, which never produces a write-back)."""
        ms = self.miss
        if ms is None or ms.for_icache:
            return None
        if self.lookup(ms.address) is not None:
            return None
        set_idx, _ = self._index_tag(ms.address)
        for line in self.sets[set_idx]:
            if not line.state.is_valid:
                return None
        return self.sets[set_idx][self.rr[set_idx]]

    def miss_complete(self, resp_state: LineState, data: Optional[bytes]) -> Union[Install, Retry]:
        """Resolve the outstanding miss with the transaction's result.

        A unique-access miss that saw a concurrent snoop read or lost its
        copy to a snoop invalidation must not install with stale
        uniqueness: it is retried (a CleanUnique whose copy was
        invalidated needs the data now, so it comes back as ReadUnique).
        """
        ms = self.miss
        if ms is None:
            raise RuntimeError(f"core {self.core_id}: miss_complete with no outstanding miss")
        if ms.unique_sought and (ms.snoop_read_seen or ms.invalidated_by_snoop):
            kind = ms.kind
            if kind is CoherentKind.CLEAN_UNIQUE and ms.invalidated_by_snoop:
                kind = CoherentKind.READ_UNIQUE
            ms.kind = kind
            ms.unique_sought = True
            ms.snoop_read_seen = False
            ms.invalidated_by_snoop = False
            return Retry(kind)

        writeback = evicted = None
        if ms.kind is CoherentKind.CLEAN_UNIQUE:
            hit = self.lookup(ms.address)
            if hit is None:
                raise RuntimeError("CleanUnique completion without a local copy")
            hit[1].state = resp_state
        else:
            icache = ms.for_icache
            writeback, evicted = self._install(ms.address, resp_state, data, icache=icache)
        self.miss = None
        return Install(resp_state, writeback, evicted)

    def _install(
        self, address: int, state: LineState, data: Optional[bytes], icache: bool
    ) -> Tuple[Optional[Tuple[int, bytes]], Optional[int]]:
        set_idx, tag = self._index_tag(address)
        ways = (self.isets if icache else self.sets)[set_idx]
        rr = self.irr if icache else self.rr
        victim = None
        for line in ways:
            if not line.state.is_valid:
                victim = line
                break
        writeback = evicted = None
        if victim is None:
            victim = ways[rr[set_idx]]
            evicted = self._addr_of(set_idx, victim.tag)
            if not icache and victim.state.is_dirty:
                writeback = (evicted, victim.data)
        victim.tag = tag
        victim.state = state
        victim.data = bytes(data) if data is not None else bytes(self.line_size)
        rr[set_idx] = (rr[set_idx] + 1) % self.ways
        return writeback, evicted

    def write_word(self, address: int, value: int) -> None:
        """Apply the store that rode on a unique-access miss completion."""
        hit = self.lookup(address)
        if hit is None:
            raise RuntimeError("store completion against a missing line")
        hit[1].data = set_word(hit[1].data, address % self.line_size, value)

    def take_dirty_responsibility(self, address: int) -> None:
        """Promote a clean local copy to Owned: a retried upgrade collected
        pass_dirty without data, so this cache now answers for the line."""
        hit = self.lookup(address)
        if hit is not None and not hit[1].state.is_dirty:
            hit[1].state = LineState.OWNED

    def evict(self, set_idx: int, icache: bool = False) -> Optional[Tuple[int, bytes]]:
        """Force an eviction in a full set; dirty victims yield a write-back.

        No-op (returns None) when the set still has an invalid way.
        """
        ways = (self.isets if icache else self.sets)[set_idx]
        if any(not line.state.is_valid for line in ways):
            return None
        rr = self.irr if icache else self.rr
        victim = ways[rr[set_idx]]
        writeback = None
        if not icache and victim.state.is_dirty:
            writeback = (self._addr_of(set_idx, victim.tag), victim.data)
        victim.state = LineState.INVALID
        return writeback

    # -- inspection ----------------------------------------------------------

    def valid_lines(self, icache: bool = False):
        """Yield (line_address, line) for every valid entry."""
        arrays = self.isets if icache else self.sets
        for set_idx, ways in enumerate(arrays):
            for line in ways:
                if line.state.is_valid:
                    yield self._addr_of(set_idx, line.tag), line
