"""Flat backing store behind the coherency unit.

Stands in for the shared last-level cache plus main memory: a sparse
line-addressed store with one fixed latency per operation type. Writes
take effect in issue order (so same-line ordering is trivial); only the
responses are delayed by the configured latency.
"""
from __future__ import annotations

from typing import Dict, List, Tuple


class MemoryFault(ValueError):
    """Misaligned or otherwise illegal memory access."""


class MemoryModel:
    def __init__(self, line_size: int, read_latency: int = 20, write_latency: int = 20):
        self.line_size = line_size
        self.read_latency = read_latency
        self.write_latency = write_latency
        self.contents: Dict[int, bytes] = {}
        # (due_cycle, tag, addr, data) for reads awaiting their response
        self.inflight: List[Tuple[int, object, int, bytes]] = []
        self.reads = 0
        self.writes = 0
        self.reads_by_line: Dict[int, int] = {}

    def _check_aligned(self, address: int) -> None:
        if address % self.line_size != 0:
            raise MemoryFault(f"address {address:#x} not aligned to {self.line_size}-byte lines")
        if address < 0 or address >= 1 << 32:
            raise MemoryFault(f"address {address:#x} outside the 32-bit physical range")

    def peek(self, address: int) -> bytes:
        """Current line value without timing side effects (zero fill)."""
        self._check_aligned(address)
        return self.contents.get(address, bytes(self.line_size))

    def read(self, address: int, now: int, tag: object) -> int:
        """Issue a line read; the response is collected via take_completions.

        Returns the completion cycle. The data is latched at issue, which
        preserves issue order against later writes to the same line.
        """
        self._check_aligned(address)
        data = self.contents.get(address, bytes(self.line_size))
        due = now + self.read_latency
        self.inflight.append((due, tag, address, data))
        self.reads += 1
        self.reads_by_line[address] = self.reads_by_line.get(address, 0) + 1
        return due

    def write(self, address: int, data: bytes, now: int) -> int:
        """Issue a line write; contents update immediately, response at +latency."""
        self._check_aligned(address)
        if len(data) != self.line_size:
            raise MemoryFault(f"write of {len(data)} bytes to {self.line_size}-byte line")
        self.contents[address] = bytes(data)
        self.writes += 1
        return now + self.write_latency

    def take_completions(self, now: int) -> List[Tuple[object, int, bytes]]:
        """Pop all read responses due at or before `now`, in issue order."""
        done = [(tag, addr, data) for (due, tag, addr, data) in self.inflight if due <= now]
        if done:
            self.inflight = [e for e in self.inflight if e[0] > now]
        return done

    def busy(self) -> bool:
        return bool(self.inflight)

    def load_image(self, text: str) -> None:
        """Preload memory from line-oriented text: `<addr_hex> <byte_hex...>`."""
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            try:
                addr = int(fields[0], 16)
                data = bytes(int(b, 16) for b in fields[1:])
            except ValueError as exc:
                raise MemoryFault(f"memory image line {lineno}: {exc}") from exc
            self._check_aligned(addr)
            if len(data) != self.line_size:
                raise MemoryFault(
                    f"memory image line {lineno}: {len(data)} bytes, expected {self.line_size}"
                )
            self.contents[addr] = data
