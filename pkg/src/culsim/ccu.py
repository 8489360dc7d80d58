"""Cache coherency unit.

Routes non-coherent requests straight at the memory port, serializes
coherent ones through a round-robin mux and a decoder guarded by a
collision table (per-line mutual exclusion, pipelined across distinct
lines), fans out snoops, aggregates CR responses in per-core FIFO order,
buffers first-responder CD data, and drains write-backs to memory
through a bounded FIFO inside the memory unit.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Deque, Dict, List, Optional, Tuple

from .protocol import (
    CoherentKind,
    DATA_KINDS,
    SNOOPING_KINDS,
    SnoopRequest,
    SnoopResponse,
)


class ProtocolFault(RuntimeError):
    """Internal protocol violation (e.g. a CR with no matching AC)."""


class Path(Enum):
    COHERENT = "coherent"
    MEMORY = "memory"


def route(kind: CoherentKind) -> Path:
    """ACE demux: snooping transactions go to the coherent pipeline,
    everything else (including the initiator's own write-backs) goes
    straight to the memory interface."""
    return Path.COHERENT if kind in SNOOPING_KINDS else Path.MEMORY


def mux_grant(pending: Dict[int, int], last_granted: int, n_cores: int) -> int:
    """Pick the next coherent request: earliest arrival cycle wins,
    same-cycle ties rotate round-robin starting after last_granted."""
    if not pending:
        raise ValueError("mux_grant with nothing pending")
    best = min(pending.values())
    for i in range(1, n_cores + 1):
        core = (last_granted + i) % n_cores
        if pending.get(core) == best:
            return core
    raise AssertionError("unreachable")


class Phase(Enum):
    DECODED = 0
    SNOOPING = 1
    RESPONDING = 2
    MEM_ACCESS = 3
    DONE = 4


@dataclass
class CcuTransaction:
    id: int
    initiator: int
    kind: CoherentKind
    address: int
    from_icache: bool = False
    phase: Phase = Phase.DECODED
    cr_pending: int = 0
    any_is_shared: int = 0
    any_pass_dirty: int = 0
    data: Optional[bytes] = None
    data_source: Optional[int] = None  # first responding core, None = memory/no data
    mem_requested: bool = False
    r_scheduled: bool = False

    def advance(self, phase: Phase) -> None:
        if phase.value < self.phase.value:
            raise ProtocolFault(f"txn {self.id}: phase moved backwards {self.phase} -> {phase}")
        self.phase = phase


class CollisionTable:
    """Associative table of in-flight line addresses. A lookup hit (or a
    full table) stalls the decoder until the older transaction is done.
    Requests anywhere within an in-flight line collide with it."""

    def __init__(self, capacity: int = 8, line_size: int = 1):
        self.capacity = capacity
        self.line_size = line_size
        self.entries: set = set()

    def _align(self, address: int) -> int:
        return address - (address % self.line_size)

    def check(self, address: int) -> bool:
        """True = proceed (address inserted), False = stall."""
        line = self._align(address)
        if line in self.entries or len(self.entries) >= self.capacity:
            return False
        self.entries.add(line)
        return True

    def release(self, address: int) -> None:
        self.entries.discard(self._align(address))


class CrOrderFifo:
    """Per-snooped-core FIFOs of transaction ids in AC-issue order: the
    snoop channels carry no transaction id, so the k-th CR on a stream
    belongs to the k-th AC issued on it."""

    def __init__(self, n_cores: int):
        self.queues: List[Deque[int]] = [deque() for _ in range(n_cores)]

    def push(self, core: int, txn_id: int) -> None:
        self.queues[core].append(txn_id)

    def pop(self, core: int) -> int:
        if not self.queues[core]:
            raise ProtocolFault(f"CR from core {core} with empty order FIFO")
        return self.queues[core].popleft()


def decode_and_snoop(
    initiator: int, kind: CoherentKind, address: int, n_cores: int,
    coherent_ifetch: bool, from_icache: bool = False,
) -> List[Tuple[int, SnoopRequest, bool, bool]]:
    """Snoop fan-out for one decoded transaction.

    Every cache except the initiating one is probed: other cores'
    data caches always, instruction caches only when they are coherent,
    and the initiator core's own sibling structure (its icache for a
    data-side request, its dcache for a coherent ifetch) so one core's
    split caches can never disagree about uniqueness.
    """
    req = SnoopRequest(kind=kind, address=address)
    fanout = []
    for core in range(n_cores):
        if core == initiator:
            probe_d = from_icache
            probe_i = coherent_ifetch and not from_icache
        else:
            probe_d = True
            probe_i = coherent_ifetch
        if probe_d or probe_i:
            fanout.append((core, req, probe_d, probe_i))
    return fanout


@dataclass
class MemOp:
    kind: str  # "read" | "write"
    address: int
    ready_at: int
    txn_id: Optional[int] = None
    core: Optional[int] = None
    data: Optional[bytes] = None


class Ccu:
    def __init__(
        self,
        n_cores: int,
        line_size: int,
        coherent_ifetch: bool,
        ccu_stage: int = 1,
        snoop_hop: int = 1,
        wb_depth: int = 4,
        handshake_depth: int = 2,
        collision_capacity: int = 8,
        serialize: bool = False,
    ):
        self.n_cores = n_cores
        self.line_size = line_size
        self.coherent_ifetch = coherent_ifetch
        self.ccu_stage = ccu_stage
        self.snoop_hop = snoop_hop
        self.handshake_depth = handshake_depth
        self.serialize = serialize

        self.pending: Dict[int, Tuple[int, CoherentKind, int, bool]] = {}
        self.last_granted = n_cores - 1
        self.hold: Optional[Tuple[int, CoherentKind, int, bool]] = None
        self.collision = CollisionTable(collision_capacity, line_size)
        self.txns: Dict[int, CcuTransaction] = {}
        self.next_id = 0
        self.cr_fifo = CrOrderFifo(n_cores)
        # (due, txn_id, request, probe_d, probe_i) awaiting delivery per core
        self.ac_outbox: List[Deque[tuple]] = [deque() for _ in range(n_cores)]
        self.cr_inbox: Deque[tuple] = deque()  # (due, from_core, resp, data)
        self.r_outbox: List[Deque[Tuple[int, int]]] = [deque() for _ in range(n_cores)]
        self.wb_fifo: Deque[Tuple[int, bytes]] = deque()
        self.wb_depth = wb_depth
        self.pending_ops: Deque[MemOp] = deque()
        self.collision_stalls = 0
        self.c2c_transfers = 0

    # -- request intake ------------------------------------------------------

    def submit(self, core: int, kind: CoherentKind, address: int, now: int,
               data: Optional[bytes] = None, from_icache: bool = False) -> bool:
        """Accept one request from a core's miss handler. Returns False when
        the request could not be accepted this cycle (full write-back FIFO)."""
        if route(kind) is Path.COHERENT:
            if core in self.pending:
                raise ProtocolFault(f"core {core}: coherent request while one is pending")
            self.pending[core] = (now, kind, address, from_icache)
            return True
        if kind is CoherentKind.WRITE_BACK:
            return self.push_writeback(address, data)
        op = "read" if kind is CoherentKind.READ_NO_SNOOP else "write"
        self.pending_ops.append(
            MemOp(op, address, ready_at=now + self.ccu_stage, core=core, data=data)
        )
        return True

    def push_writeback(self, address: int, data: bytes) -> bool:
        if len(self.wb_fifo) >= self.wb_depth:
            return False
        self.wb_fifo.append((address, bytes(data)))
        return True

    def upgrade_pending(self, core: int, kind: CoherentKind) -> bool:
        """Re-encode a core's coherent request while it still sits before
        the decoder (used when a snoop invalidation hits a pending
        CleanUnique, which then needs the data and becomes ReadUnique).
        Returns False once the request has already been accepted."""
        if core in self.pending:
            arrival, _, address, from_icache = self.pending[core]
            self.pending[core] = (arrival, kind, address, from_icache)
            return True
        if self.hold is not None and self.hold[0] == core:
            _, _, address, from_icache = self.hold
            self.hold = (core, kind, address, from_icache)
            return True
        return False

    # -- pipeline stages -------------------------------------------------------

    def decoder_step(self, now: int) -> Optional[CcuTransaction]:
        """Grant at most one coherent request and run it through the
        collision checker; a collision (or full table) holds the decoder."""
        if self.hold is None:
            if not self.pending:
                return None
            if self.serialize and self.txns:
                return None
            arrivals = {c: a for c, (a, _, _, _) in self.pending.items()}
            ready = {c: a for c, a in arrivals.items() if a <= now}
            if not ready:
                return None
            core = mux_grant(ready, self.last_granted, self.n_cores)
            self.last_granted = core
            self.hold = (core,) + self.pending.pop(core)[1:]
        core, kind, address, from_icache = self.hold
        if not self.collision.check(address):
            self.collision_stalls += 1
            return None
        self.hold = None
        txn = CcuTransaction(
            id=self.next_id, initiator=core, kind=kind, address=address,
            from_icache=from_icache,
        )
        self.next_id += 1
        self.txns[txn.id] = txn
        fanout = decode_and_snoop(
            core, kind, address, self.n_cores, self.coherent_ifetch, from_icache
        )
        due = now + self.ccu_stage + self.snoop_hop
        for target, req, probe_d, probe_i in fanout:
            self.cr_fifo.push(target, txn.id)
            self.ac_outbox[target].append((due, txn.id, req, probe_d, probe_i))
        txn.cr_pending = len(fanout)
        txn.advance(Phase.SNOOPING)
        return txn

    def collect_cr(self, from_core: int, resp: SnoopResponse,
                   data: Optional[bytes]) -> CcuTransaction:
        """Attribute one CR (+CD) to the transaction at the head of that
        core's snoop stream and fold it into the aggregate. The first
        responder that transfers data supplies the line."""
        txn_id = self.cr_fifo.pop(from_core)
        txn = self.txns[txn_id]
        txn.cr_pending -= 1
        txn.any_is_shared |= resp.is_shared
        txn.any_pass_dirty |= resp.pass_dirty
        if resp.data_transfer and txn.data_source is None and txn.data is None:
            txn.data = bytes(data)
            txn.data_source = from_core
        if txn.cr_pending == 0:
            txn.advance(Phase.RESPONDING)
        return txn

    def snoop_unit_step(self, now: int) -> None:
        while self.cr_inbox and self.cr_inbox[0][0] <= now:
            _, from_core, resp, beats = self.cr_inbox.popleft()
            self.collect_cr(from_core, resp, beats.to_line() if beats else None)

    def completion_step(self, now: int) -> None:
        """Move fully-responded transactions toward the R channel: snoop
        data is forwarded directly (no memory read); transactions with no
        responder data fetch the line from memory first."""
        for txn in list(self.txns.values()):
            if txn.r_scheduled or txn.cr_pending > 0 or txn.phase is Phase.SNOOPING:
                continue
            needs_data = txn.kind in DATA_KINDS
            if needs_data and txn.data is None:
                if not txn.mem_requested:
                    txn.mem_requested = True
                    txn.advance(Phase.MEM_ACCESS)
                    self.pending_ops.append(
                        MemOp("read", txn.address, ready_at=now, txn_id=txn.id)
                    )
                continue
            if txn.data_source is not None:
                self.c2c_transfers += 1
            txn.r_scheduled = True
            self.r_outbox[txn.initiator].append((now + self.ccu_stage, txn.id))

    def memory_unit_step(self, now: int, mem) -> bool:
        """Issue at most one operation on the serialized memory port.
        A queued request never bypasses a same-line write-back still
        sitting in the FIFO; the FIFO drains when the port would
        otherwise idle."""
        if self.pending_ops and self.pending_ops[0].ready_at <= now:
            op = self.pending_ops[0]
            if all(addr != op.address for addr, _ in self.wb_fifo):
                self.pending_ops.popleft()
                if op.kind == "read":
                    tag = ("txn", op.txn_id) if op.txn_id is not None else ("nc", op.core)
                    mem.read(op.address, now, tag)
                else:
                    mem.write(op.address, op.data, now)
                return True
        if self.wb_fifo:
            address, data = self.wb_fifo.popleft()
            mem.write(address, data, now)
            return True
        return False

    def memory_data(self, txn_id: int, data: bytes) -> None:
        txn = self.txns[txn_id]
        txn.data = bytes(data)

    def take_r(self, core: int, now: int) -> Optional[CcuTransaction]:
        """Transaction whose R burst is at the initiator this cycle, if any."""
        box = self.r_outbox[core]
        if box and box[0][0] <= now:
            return self.txns[box[0][1]]
        return None

    def finish(self, txn_id: int) -> None:
        """Retire a transaction: the initiator consumed the R burst and
        applied (or retried) the miss; the collision entry is released."""
        txn = self.txns.pop(txn_id)
        txn.advance(Phase.DONE)
        box = self.r_outbox[txn.initiator]
        if box and box[0][1] == txn_id:
            box.popleft()
        self.collision.release(txn.address)

    def active_addresses(self) -> List[int]:
        return [t.address for t in self.txns.values()]

    def busy(self) -> bool:
        return bool(
            self.txns
            or self.pending
            or self.hold
            or self.pending_ops
            or self.wb_fifo
            or self.cr_inbox
            or any(self.ac_outbox)
            or any(self.r_outbox)
        )
