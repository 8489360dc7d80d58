"""Cycle-driven simulation kernel.

Instantiates N cores' caches, the coherency unit and the backing store
from a SimConfig, advances everything one cycle at a time and collects
SimStats. Runs are bit-for-bit deterministic for equal (config, streams).

Component evaluation order within a cycle: snoop deliveries, cache
controllers (in arbiter priority), CCU stages (decoder, snoop unit,
memory unit), memory, stream issue — so coherency updates always land
before the core requests of the same cycle.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Deque, Dict, List, Optional, Tuple

from .cache import (
    CacheModel,
    ConfigError,
    RequesterId,
    Retry,
    Served,
    arbitrate,
    requester_for_port,
    word_at,
)
from .ccu import Ccu, ProtocolFault
from .memsys import MemoryModel
from .protocol import (
    CoherentKind,
    CoreOp,
    LineState,
    OpKind,
    completion_state,
)
from . import verify


class DeadlockError(RuntimeError):
    """Watchdog fired: pending work but no forward progress."""


class CoherenceViolation(RuntimeError):
    """A per-cycle invariant monitor tripped."""


@dataclass
class Latencies:
    l1_hit: int = 1
    snoop_hop: int = 1
    ccu_stage: int = 1
    mem_read: int = 20
    mem_write: int = 20


@dataclass
class FifoDepths:
    writeback: int = 4
    handshake: int = 2
    collision_capacity: int = 8


@dataclass
class SimConfig:
    n_cores: int = 2
    line_size: int = 16
    cache_size: int = 8192
    ways: int = 4
    coherent_ifetch: bool = False
    latencies: Latencies = field(default_factory=Latencies)
    fifo_depths: FifoDepths = field(default_factory=FifoDepths)
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.n_cores <= 4:
            raise ConfigError(f"n_cores: {self.n_cores} outside the supported range 2..4")
        if self.line_size < 4 or self.line_size & (self.line_size - 1):
            raise ConfigError(f"line_size: {self.line_size} is not a power of two >= 4")
        if self.ways < 1:
            raise ConfigError(f"ways: {self.ways} must be >= 1")
        if self.cache_size % (self.ways * self.line_size) != 0:
            raise ConfigError(
                f"cache_size: {self.cache_size} not divisible by ways*line_size"
            )
        for name in ("l1_hit", "snoop_hop", "ccu_stage", "mem_read", "mem_write"):
            if getattr(self.latencies, name) < 1:
                raise ConfigError(f"latencies.{name}: must be >= 1")
        for name in ("writeback", "handshake", "collision_capacity"):
            if getattr(self.fifo_depths, name) < 1:
                raise ConfigError(f"fifo_depths.{name}: must be >= 1")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed: must fit in 64 bits")

    def to_dict(self) -> dict:
        return {
            "n_cores": self.n_cores,
            "line_size": self.line_size,
            "cache_size": self.cache_size,
            "ways": self.ways,
            "coherent_ifetch": self.coherent_ifetch,
            "latencies": vars(self.latencies).copy(),
            "fifo_depths": vars(self.fifo_depths).copy(),
            "seed": self.seed,
        }


_BOOL_VALUES = {"1": True, "0": False, "true": True, "false": False}


def parse_config(text: str) -> SimConfig:
    """Parse `key = value` config text; nested fields use dotted names
    (e.g. latencies.mem_read). Unknown keys are errors."""
    cfg = SimConfig()
    scalar = {f.name for f in fields(SimConfig)} - {"latencies", "fifo_depths"}
    nested = {"latencies": cfg.latencies, "fifo_depths": cfg.fifo_depths}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, _, value = (p.strip() for p in line.partition("="))
        try:
            if key == "coherent_ifetch":
                cfg.coherent_ifetch = _BOOL_VALUES[value.lower()]
            elif key in scalar:
                setattr(cfg, key, int(value, 0))
            elif "." in key:
                group, _, sub = key.partition(".")
                if group not in nested or sub not in vars(nested[group]):
                    raise ConfigError(f"config line {lineno}: unknown key '{key}'")
                setattr(nested[group], sub, int(value, 0))
            else:
                raise ConfigError(f"config line {lineno}: unknown key '{key}'")
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config line {lineno}: bad value for '{key}'") from exc
    cfg.validate()
    return cfg


@dataclass
class CoreStats:
    ops: int = 0
    loads: int = 0
    stores: int = 0
    ifetches: int = 0
    hits: int = 0
    misses: int = 0
    snoop_served_misses: int = 0
    writebacks: int = 0
    retries: int = 0
    stall_cycles: int = 0

    def to_dict(self) -> dict:
        return vars(self).copy()


def _format_fraction(value: Optional[Fraction]) -> str:
    if value is None:
        return "0.00"
    cents = round(value * 100)
    return f"{cents // 100}.{cents % 100:02d}"


@dataclass
class SimStats:
    cycles: int = 0
    mem_reads: int = 0
    mem_writes: int = 0
    ccu_collision_stalls: int = 0
    cache_to_cache_transfers: int = 0
    miss_latency_total: int = 0
    miss_count: int = 0
    cores: List[CoreStats] = field(default_factory=list)

    @property
    def avg_miss_latency(self) -> Optional[Fraction]:
        if self.miss_count == 0:
            return None
        return Fraction(self.miss_latency_total, self.miss_count)

    def to_dict(self) -> dict:
        return {
            "cycles": self.cycles,
            "mem_reads": self.mem_reads,
            "mem_writes": self.mem_writes,
            "ccu_collision_stalls": self.ccu_collision_stalls,
            "cache_to_cache_transfers": self.cache_to_cache_transfers,
            "avg_miss_latency": _format_fraction(self.avg_miss_latency),
            "cores": [c.to_dict() for c in self.cores],
        }


@dataclass(frozen=True)
class TraceOp:
    """One trace record: per-core program order is the record order, and a
    core issues its next op only after the previous one's response."""

    core: int
    op: CoreOp


def to_streams(ops, n_cores: int) -> List[List[CoreOp]]:
    """Split a flat TraceOp sequence into the per-core streams run() takes."""
    streams: List[List[CoreOp]] = [[] for _ in range(n_cores)]
    for trace_op in ops:
        if not 0 <= trace_op.core < n_cores:
            raise ConfigError(f"trace op for core {trace_op.core} of {n_cores}")
        streams[trace_op.core].append(trace_op.op)
    return streams


@dataclass
class _Port:
    """One core's in-order issue state: at most one op in flight."""

    stream: Deque[CoreOp] = field(default_factory=deque)
    current: Optional[CoreOp] = None
    waiting_miss: bool = False
    miss_start: int = 0
    ready_at: int = 0
    nc_fill: Optional[Tuple[int, bytes]] = None
    observations: List[int] = field(default_factory=list)


def build(config: SimConfig, serialize: bool = False, monitor: bool = False) -> "Simulation":
    """Instantiate a simulation: caches empty, cycle 0."""
    config.validate()
    return Simulation(config, serialize=serialize, monitor=monitor)


class Simulation:
    def __init__(self, config: SimConfig, serialize: bool = False, monitor: bool = False):
        self.config = config
        self.monitor = monitor
        lat = config.latencies
        self.caches = [
            CacheModel(
                core_id=i,
                line_size=config.line_size,
                cache_size=config.cache_size,
                ways=config.ways,
                coherent_ifetch=config.coherent_ifetch,
            )
            for i in range(config.n_cores)
        ]
        self.ccu = Ccu(
            n_cores=config.n_cores,
            line_size=config.line_size,
            coherent_ifetch=config.coherent_ifetch,
            ccu_stage=lat.ccu_stage,
            snoop_hop=lat.snoop_hop,
            wb_depth=config.fifo_depths.writeback,
            handshake_depth=config.fifo_depths.handshake,
            collision_capacity=config.fifo_depths.collision_capacity,
            serialize=serialize,
        )
        self.mem = MemoryModel(config.line_size, lat.mem_read, lat.mem_write)
        self.ports = [_Port() for _ in range(config.n_cores)]
        self.ac_in: List[Deque[tuple]] = [deque() for _ in range(config.n_cores)]
        self.cycle = 0
        self.stats = SimStats(cores=[CoreStats() for _ in range(config.n_cores)])
        self._progress = True
        self._last_progress = 0

    # -- per-cycle phases ------------------------------------------------------

    def step(self) -> None:
        now = self.cycle
        self._progress = False
        self._deliver_snoops(now)
        for core in range(self.config.n_cores):
            self._cache_controllers(core, now)
        if self.ccu.decoder_step(now) is not None:
            self._progress = True
        self.ccu.snoop_unit_step(now)
        self.ccu.completion_step(now)
        if self.ccu.memory_unit_step(now, self.mem):
            self._progress = True
        self._memory_phase(now)
        self._stream_issue(now)
        for core, port in enumerate(self.ports):
            if port.current is not None:
                self.stats.cores[core].stall_cycles += 1
        if self.monitor:
            self._run_monitors()
        if self._progress:
            self._last_progress = now
        self.cycle = now + 1
        self.stats.cycles = self.cycle
        self.stats.mem_reads = self.mem.reads
        self.stats.mem_writes = self.mem.writes
        self.stats.ccu_collision_stalls = self.ccu.collision_stalls
        self.stats.cache_to_cache_transfers = self.ccu.c2c_transfers

    def _deliver_snoops(self, now: int) -> None:
        depth = self.config.fifo_depths.handshake
        for core in range(self.config.n_cores):
            box = self.ccu.ac_outbox[core]
            while box and box[0][0] <= now and len(self.ac_in[core]) < depth:
                self.ac_in[core].append(box.popleft()[1:])
                self._progress = True

    def _cache_controllers(self, core: int, now: int) -> None:
        cache = self.caches[core]
        port = self.ports[core]
        candidates = {}

        txn = self.ccu.take_r(core, now)
        if txn is not None and self._install_feasible(cache, txn):
            candidates[RequesterId.MISS_HANDLER] = ("r", txn)
        elif port.nc_fill is not None:
            candidates[RequesterId.MISS_HANDLER] = ("nc", port.nc_fill)
        if self.ac_in[core]:
            candidates[RequesterId.SNOOP_CTRL] = ("snoop", None)
        op = port.current
        dcache_op = (
            op is not None and not port.waiting_miss and op.kind is not OpKind.IFETCH
        )
        if dcache_op:
            candidates[requester_for_port(op.port)] = ("op", op)

        if candidates:
            winner = arbitrate(candidates)
            kind, payload = candidates[winner]
            if kind == "r":
                self._apply_completion(core, payload, now)
            elif kind == "nc":
                self._apply_nc_fill(core, payload, now)
            elif kind == "snoop":
                self._process_snoop(core, now)
            else:
                self._execute_op(core, payload, now)
            self._progress = True

        # The icache has its own port: ifetches run regardless of the
        # data-cache arbitration outcome.
        op = port.current
        if op is not None and not port.waiting_miss and op.kind is OpKind.IFETCH:
            self._execute_op(core, op, now)
            self._progress = True

    def _install_feasible(self, cache: CacheModel, txn) -> bool:
        ms = cache.miss
        if ms is None:
            return True
        if ms.unique_sought and (ms.snoop_read_seen or ms.invalidated_by_snoop):
            # a retry discards the attempt, but dirty data it collected
            # must first fit into the write-back FIFO
            if txn.any_pass_dirty and txn.data is not None:
                return len(self.ccu.wb_fifo) < self.ccu.wb_depth
            return True
        victim = cache.needs_eviction()
        if victim is not None and victim.state.is_dirty:
            return len(self.ccu.wb_fifo) < self.ccu.wb_depth
        return True

    def _execute_op(self, core: int, op: CoreOp, now: int) -> None:
        cache = self.caches[core]
        port = self.ports[core]
        stats = self.stats.cores[core]
        result = cache.core_access(op, now)
        if isinstance(result, Served):
            stats.hits += 1
            if result.value is not None:
                port.observations.append(result.value)
            port.current = None
            port.ready_at = now + self.config.latencies.l1_hit
        else:
            stats.misses += 1
            port.waiting_miss = True
            port.miss_start = now
            ms = cache.miss
            accepted = self.ccu.submit(
                core, result.kind, ms.address, now, from_icache=ms.for_icache
            )
            if not accepted:
                raise ProtocolFault("miss request refused by the CCU")

    def _process_snoop(self, core: int, now: int) -> None:
        txn_id, req, probe_d, probe_i = self.ac_in[core].popleft()
        cache = self.caches[core]
        resp, data = cache.handle_snoop(req, probe_dcache=probe_d, probe_icache=probe_i)
        self.ccu.cr_inbox.append((now + self.config.latencies.snoop_hop, core, resp, data))
        if resp.pass_dirty and data is None:
            # data-less dirty handoff (CleanUnique stripping a dirty
            # holder): responsibility lands on the initiator's copy now,
            # so no cycle ever shows the line clean-everywhere but stale
            initiator = self.ccu.txns[txn_id].initiator
            self.caches[initiator].take_dirty_responsibility(req.address)
        # a pending CleanUnique that just lost its copy needs the data:
        # re-encode it as ReadUnique while it still sits before the decoder
        ms = cache.miss
        if (
            ms is not None
            and ms.kind is CoherentKind.CLEAN_UNIQUE
            and ms.invalidated_by_snoop
            and self.ccu.upgrade_pending(core, CoherentKind.READ_UNIQUE)
        ):
            ms.kind = CoherentKind.READ_UNIQUE
            ms.invalidated_by_snoop = False

    def _apply_completion(self, core: int, txn, now: int) -> None:
        cache = self.caches[core]
        port = self.ports[core]
        stats = self.stats.cores[core]
        op = port.current
        store_follows = int(op is not None and op.kind is OpKind.STORE)
        resp_state = completion_state(
            txn.kind, txn.any_is_shared, txn.any_pass_dirty, store_follows
        )
        result = cache.miss_complete(resp_state, txn.data)
        self.ccu.finish(txn.id)
        if isinstance(result, Retry):
            stats.retries += 1
            if txn.any_pass_dirty:
                # dirty responsibility collected by the discarded attempt
                # survives it: data drains to memory, a data-less handoff
                # re-dirties the initiator's own copy
                if txn.data is not None:
                    if not self.ccu.push_writeback(txn.address, txn.data):
                        raise ProtocolFault("write-back refused after feasibility check")
                else:
                    cache.take_dirty_responsibility(txn.address)
            self.ccu.submit(core, result.kind, cache.miss.address, now,
                            from_icache=cache.miss.for_icache)
            return
        if result.writeback is not None:
            if not self.ccu.push_writeback(*result.writeback):
                raise ProtocolFault("write-back refused after feasibility check")
            stats.writebacks += 1
        if store_follows:
            cache.write_word(op.address, op.value)
        elif op is not None:
            hit = cache.lookup(op.address, icache=(op.kind is OpKind.IFETCH))
            port.observations.append(
                word_at(hit[1].data, op.address % self.config.line_size)
            )
        if txn.data_source is not None:
            stats.snoop_served_misses += 1
        self.stats.miss_latency_total += now - port.miss_start
        self.stats.miss_count += 1
        port.current = None
        port.waiting_miss = False
        port.ready_at = now

    def _apply_nc_fill(self, core: int, fill: Tuple[int, bytes], now: int) -> None:
        cache = self.caches[core]
        port = self.ports[core]
        _, data = fill
        cache.miss_complete(LineState.SHARED, data)
        op = port.current
        hit = cache.lookup(op.address, icache=True)
        port.observations.append(word_at(hit[1].data, op.address % self.config.line_size))
        self.stats.miss_latency_total += now - port.miss_start
        self.stats.miss_count += 1
        port.nc_fill = None
        port.current = None
        port.waiting_miss = False
        port.ready_at = now

    def _memory_phase(self, now: int) -> None:
        for tag, addr, data in self.mem.take_completions(now):
            kind, ident = tag
            if kind == "txn":
                self.ccu.memory_data(ident, data)
            else:
                self.ports[ident].nc_fill = (addr, data)
            self._progress = True

    def _stream_issue(self, now: int) -> None:
        for core, port in enumerate(self.ports):
            if port.current is None and port.stream and now >= port.ready_at:
                op = port.stream.popleft()
                port.current = op
                stats = self.stats.cores[core]
                stats.ops += 1
                if op.kind is OpKind.LOAD:
                    stats.loads += 1
                elif op.kind is OpKind.STORE:
                    stats.stores += 1
                else:
                    stats.ifetches += 1
                self._progress = True

    # -- monitors / inspection ------------------------------------------------

    def _run_monitors(self) -> None:
        active = self.ccu.active_addresses()
        if len(active) != len(set(active)):
            raise CoherenceViolation(
                f"cycle {self.cycle}: two in-flight transactions share a line"
            )
        view = self.snapshot_invariants()
        problems = verify.check_swmr(view) + verify.check_value(view)
        if problems:
            raise CoherenceViolation(f"cycle {self.cycle}: " + "; ".join(problems))

    def snapshot_invariants(self) -> dict:
        """Global coherence view: per line, all valid copies plus the
        memory-side value — the input format of verify.check_swmr and
        check_value. Write-backs still queued in the memory unit are
        committed writes, so they shadow the memory array. Non-coherent
        instruction caches are outside the coherency domain and are not
        part of the view."""
        view: Dict[int, Tuple[list, bytes]] = {}
        for core, cache in enumerate(self.caches):
            for addr, line in cache.valid_lines():
                view.setdefault(addr, ([], None))[0].append(
                    verify.CopyView(core, line.state, line.data, False)
                )
            if self.config.coherent_ifetch:
                for addr, line in cache.valid_lines(icache=True):
                    view.setdefault(addr, ([], None))[0].append(
                        verify.CopyView(core, line.state, line.data, True)
                    )
        pending_wb = dict(self.ccu.wb_fifo)  # youngest same-line entry wins
        return {
            addr: (copies, pending_wb.get(addr, self.mem.peek(addr)))
            for addr, (copies, _) in sorted(view.items())
        }

    def _dump_state(self) -> str:
        lines = [f"cycle {self.cycle}"]
        for core, port in enumerate(self.ports):
            cache = self.caches[core]
            lines.append(
                f"  core {core}: current={port.current} waiting={port.waiting_miss} "
                f"miss={cache.miss} ac_in={len(self.ac_in[core])} "
                f"stream_left={len(port.stream)}"
            )
        lines.append(
            f"  ccu: pending={self.ccu.pending} hold={self.ccu.hold} "
            f"txns={[(t.id, t.kind.value, hex(t.address), t.phase.name) for t in self.ccu.txns.values()]} "
            f"collision={sorted(self.ccu.collision.entries)} wb={len(self.ccu.wb_fifo)} "
            f"mem_ops={len(self.ccu.pending_ops)}"
        )
        lines.append(f"  mem: inflight={len(self.mem.inflight)}")
        return "\n".join(lines)

    # -- driving ---------------------------------------------------------------

    def _work_remaining(self) -> bool:
        if any(p.stream or p.current is not None or p.nc_fill is not None for p in self.ports):
            return True
        return self.ccu.busy() or self.mem.busy()

    def run(self, streams: List[List[CoreOp]], watchdog: int = 10000) -> SimStats:
        """Feed per-core op streams and advance until everything drains."""
        if len(streams) != self.config.n_cores:
            raise ConfigError(
                f"streams: got {len(streams)} streams for {self.config.n_cores} cores"
            )
        for port, ops in zip(self.ports, streams):
            port.stream.extend(ops)
        self._last_progress = self.cycle
        while self._work_remaining():
            self.step()
            if self.cycle - self._last_progress > watchdog:
                raise DeadlockError(
                    f"no forward progress for {watchdog} cycles\n" + self._dump_state()
                )
        for core, cs in enumerate(self.stats.cores):
            expected = cs.loads + cs.stores + cs.ifetches
            if cs.hits + cs.misses != expected:
                raise AssertionError(
                    f"core {core}: hits+misses != ops ({cs.hits}+{cs.misses} != {expected})"
                )
        return self.stats

    def coherent_image(self) -> Dict[int, bytes]:
        """Final memory image with dirty owners overriding memory."""
        image = dict(self.mem.contents)
        for cache in self.caches:
            for addr, line in cache.valid_lines():
                if line.state.is_dirty:
                    image[addr] = line.data
        return image
