"""MOESI/ACE coherence protocol tables.

Pure functions only. The cycle simulator, the coherency unit and the
bounded model checker all consume these tables, so every row here is
certified by the checker's exhaustive runs (verify.oracle_tables).

Line status is encoded with three flags stored alongside tag and data:

    state      ACE alias     valid shared dirty
    Modified   UniqueDirty     1     0      1
    Owned      SharedDirty     1     1      1
    Exclusive  UniqueClean     1     0      0
    Shared     SharedClean     1     1      0
    Invalid    Invalid         0     -      -

Invalid's shared/dirty bits are don't-care in hardware; they are
normalized to zero here so states hash deterministically.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Union


class LineState(Enum):
    MODIFIED = "M"
    OWNED = "O"
    EXCLUSIVE = "E"
    SHARED = "S"
    INVALID = "I"

    @property
    def ace_alias(self) -> str:
        return _ACE_ALIAS[self]

    @property
    def is_valid(self) -> bool:
        return self is not LineState.INVALID

    @property
    def is_dirty(self) -> bool:
        return self in (LineState.MODIFIED, LineState.OWNED)

    @property
    def is_unique(self) -> bool:
        return self in (LineState.MODIFIED, LineState.EXCLUSIVE)


_ACE_ALIAS = {
    LineState.MODIFIED: "UniqueDirty",
    LineState.OWNED: "SharedDirty",
    LineState.EXCLUSIVE: "UniqueClean",
    LineState.SHARED: "SharedClean",
    LineState.INVALID: "Invalid",
}


class LineFlags(NamedTuple):
    valid: int
    shared: int
    dirty: int


_FLAGS_OF_STATE = {
    LineState.MODIFIED: LineFlags(1, 0, 1),
    LineState.OWNED: LineFlags(1, 1, 1),
    LineState.EXCLUSIVE: LineFlags(1, 0, 0),
    LineState.SHARED: LineFlags(1, 1, 0),
    LineState.INVALID: LineFlags(0, 0, 0),
}

_STATE_OF_FLAGS = {
    (0, 1): LineState.MODIFIED,
    (1, 1): LineState.OWNED,
    (0, 0): LineState.EXCLUSIVE,
    (1, 0): LineState.SHARED,
}


def flags_of_state(state: LineState) -> LineFlags:
    """Status-flag triple for a line state (Invalid normalized to 0,0,0)."""
    return _FLAGS_OF_STATE[state]


def state_of_flags(flags: LineFlags) -> LineState:
    """Inverse of flags_of_state; valid=0 is Invalid whatever the other bits."""
    if not flags.valid:
        return LineState.INVALID
    return _STATE_OF_FLAGS[(flags.shared, flags.dirty)]


class CoherentKind(Enum):
    READ_SHARED = "ReadShared"
    READ_UNIQUE = "ReadUnique"
    CLEAN_UNIQUE = "CleanUnique"
    READ_ONCE = "ReadOnce"
    WRITE_BACK = "WriteBack"
    READ_NO_SNOOP = "ReadNoSnoop"
    WRITE_NO_SNOOP = "WriteNoSnoop"


# Transactions that fan out snoops to the other caches. WriteBack and the
# NoSnoop pair go straight to the memory interface.
SNOOPING_KINDS = frozenset(
    {
        CoherentKind.READ_SHARED,
        CoherentKind.READ_UNIQUE,
        CoherentKind.CLEAN_UNIQUE,
        CoherentKind.READ_ONCE,
    }
)

# Transactions whose completion claims unique access; their in-flight state
# must be re-checked against concurrent snoop reads / invalidations.
UNIQUE_KINDS = frozenset({CoherentKind.READ_UNIQUE, CoherentKind.CLEAN_UNIQUE})

# Transactions whose completion carries a data line back to the initiator.
DATA_KINDS = frozenset(
    {CoherentKind.READ_SHARED, CoherentKind.READ_UNIQUE, CoherentKind.READ_ONCE}
)


class OpKind(Enum):
    LOAD = "Load"
    STORE = "Store"
    IFETCH = "IFetch"


class Port(Enum):
    LOAD_UNIT = "LoadUnit"
    STORE_UNIT = "StoreUnit"
    PTW = "Ptw"
    ACCELERATOR = "Accelerator"
    IFETCH = "IFetch"


_DEFAULT_PORT = {
    OpKind.LOAD: Port.LOAD_UNIT,
    OpKind.STORE: Port.STORE_UNIT,
    OpKind.IFETCH: Port.IFETCH,
}


@dataclass(frozen=True)
class CoreOp:
    """One memory operation issued by a core.

    Stores carry the word value to write; loads and ifetches do not.
    The port selects which cache controller the request arrives on
    (PTW and accelerator traffic is plain read/write on its own port).
    """

    kind: OpKind
    address: int
    value: Optional[int] = None
    port: Optional[Port] = None

    def __post_init__(self):
        if self.port is None:
            object.__setattr__(self, "port", _DEFAULT_PORT[self.kind])
        if self.kind is OpKind.STORE:
            if self.value is None:
                raise ValueError("Store requires a value")
        elif self.value is not None:
            raise ValueError(f"{self.kind.value} must not carry a value")


@dataclass(frozen=True)
class SnoopRequest:
    """Probe delivered on the snoop request (AC) channel."""

    kind: CoherentKind
    address: int

    def __post_init__(self):
        if self.kind not in SNOOPING_KINDS:
            raise ValueError(f"{self.kind.value} is not a snooping transaction")


@dataclass(frozen=True)
class SnoopResponse:
    """Snoop response (CR) bits. data_transfer=0 means no CD beats follow."""

    data_transfer: int = 0
    pass_dirty: int = 0
    is_shared: int = 0
    error: int = 0


@dataclass(frozen=True)
class SnoopData:
    """Snoop data (CD) beats: the words of one full cache line."""

    beats: tuple

    WORD_BYTES = 4

    @classmethod
    def from_line(cls, data: bytes) -> "SnoopData":
        w = cls.WORD_BYTES
        return cls(
            beats=tuple(
                int.from_bytes(data[i : i + w], "little") for i in range(0, len(data), w)
            )
        )

    def to_line(self) -> bytes:
        return b"".join(beat.to_bytes(self.WORD_BYTES, "little") for beat in self.beats)


@dataclass(frozen=True)
class Hit:
    next: LineState


@dataclass(frozen=True)
class Issue:
    kind: CoherentKind


Action = Union[Hit, Issue]


def initiator_action(state: LineState, op: OpKind) -> Action:
    """What a cache controller does with a core op against a line state.

    Loads and ifetches hit on any valid state without a state change.
    Stores hit only with write permission (Modified, or Exclusive which
    silently upgrades); a store against a shared copy must first gain
    uniqueness with CleanUnique. Misses issue the matching data request:

        Load  miss -> ReadShared     Store miss -> ReadUnique
        Store on Shared/Owned -> CleanUnique
        IFetch miss (coherent icache) -> ReadOnce
    """
    if op in (OpKind.LOAD, OpKind.IFETCH):
        if state is LineState.INVALID:
            kind = CoherentKind.READ_SHARED if op is OpKind.LOAD else CoherentKind.READ_ONCE
            return Issue(kind)
        return Hit(state)
    # Store
    if state is LineState.MODIFIED:
        return Hit(LineState.MODIFIED)
    if state is LineState.EXCLUSIVE:
        return Hit(LineState.MODIFIED)
    if state in (LineState.SHARED, LineState.OWNED):
        return Issue(CoherentKind.CLEAN_UNIQUE)
    return Issue(CoherentKind.READ_UNIQUE)


# Snoopee transition table: (state, snoop kind) -> (next state, CR bits).
# Row layout: next, data_transfer, pass_dirty, is_shared.
#
# ReadShared keeps dirty responsibility at the snoopee (M -> Owned) and
# has every valid snoopee supply data, maximizing cache-to-cache service.
# ReadUnique/CleanUnique invalidate; a dirty snoopee hands responsibility
# over with pass_dirty=1 (CleanUnique without data: the initiator already
# holds an identical copy). ReadOnce behaves like ReadShared here.
_S = LineState
_SNOOPEE = {
    (_S.MODIFIED, CoherentKind.READ_SHARED): (_S.OWNED, 1, 0, 1),
    (_S.OWNED, CoherentKind.READ_SHARED): (_S.OWNED, 1, 0, 1),
    (_S.EXCLUSIVE, CoherentKind.READ_SHARED): (_S.SHARED, 1, 0, 1),
    (_S.SHARED, CoherentKind.READ_SHARED): (_S.SHARED, 1, 0, 1),
    (_S.INVALID, CoherentKind.READ_SHARED): (_S.INVALID, 0, 0, 0),
    (_S.MODIFIED, CoherentKind.READ_UNIQUE): (_S.INVALID, 1, 1, 0),
    (_S.OWNED, CoherentKind.READ_UNIQUE): (_S.INVALID, 1, 1, 0),
    (_S.EXCLUSIVE, CoherentKind.READ_UNIQUE): (_S.INVALID, 1, 0, 0),
    (_S.SHARED, CoherentKind.READ_UNIQUE): (_S.INVALID, 1, 0, 0),
    (_S.INVALID, CoherentKind.READ_UNIQUE): (_S.INVALID, 0, 0, 0),
    (_S.MODIFIED, CoherentKind.CLEAN_UNIQUE): (_S.INVALID, 0, 1, 0),
    (_S.OWNED, CoherentKind.CLEAN_UNIQUE): (_S.INVALID, 0, 1, 0),
    (_S.EXCLUSIVE, CoherentKind.CLEAN_UNIQUE): (_S.INVALID, 0, 0, 0),
    (_S.SHARED, CoherentKind.CLEAN_UNIQUE): (_S.INVALID, 0, 0, 0),
    (_S.INVALID, CoherentKind.CLEAN_UNIQUE): (_S.INVALID, 0, 0, 0),
}


def snoopee_transition(state: LineState, kind: CoherentKind) -> tuple:
    """Next state and CR response of a snooped cache line."""
    if kind is CoherentKind.READ_ONCE:
        kind = CoherentKind.READ_SHARED
    nxt, data, dirty, shared = _SNOOPEE[(state, kind)]
    return nxt, SnoopResponse(data_transfer=data, pass_dirty=dirty, is_shared=shared)


def completion_state(
    kind: CoherentKind, any_is_shared: int, any_pass_dirty: int, store_follows: int
) -> LineState:
    """Install state for a completed transaction given the CR aggregate.

    ReadShared takes Owned when a snoopee handed dirty responsibility
    over, Shared when anyone kept a copy, Exclusive when the line is the
    sole copy. Unique-access completions install Modified as soon as the
    line is (or is about to become) dirty. ReadOnce installs the line in
    the instruction cache as Shared and leaves data caches untouched.
    """
    if kind is CoherentKind.READ_SHARED:
        if any_pass_dirty:
            return LineState.OWNED
        return LineState.SHARED if any_is_shared else LineState.EXCLUSIVE
    if kind in UNIQUE_KINDS:
        if any_pass_dirty or store_follows:
            return LineState.MODIFIED
        return LineState.EXCLUSIVE
    if kind is CoherentKind.READ_ONCE:
        return LineState.SHARED
    raise ValueError(f"{kind.value} has no coherent completion")
