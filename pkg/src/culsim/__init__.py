"""culsim: snoop-based MOESI/ACE coherent-cluster simulator and verifier."""

from .protocol import (
    CoherentKind,
    CoreOp,
    LineFlags,
    LineState,
    OpKind,
    Port,
    SnoopRequest,
    SnoopResponse,
    completion_state,
    flags_of_state,
    initiator_action,
    snoopee_transition,
    state_of_flags,
)
from .sim import SimConfig, SimStats, Simulation, TraceOp, build, parse_config

__version__ = "0.1.0"

__all__ = [
    "CoherentKind",
    "CoreOp",
    "LineFlags",
    "LineState",
    "OpKind",
    "Port",
    "SimConfig",
    "SimStats",
    "Simulation",
    "SnoopRequest",
    "SnoopResponse",
    "TraceOp",
    "build",
    "completion_state",
    "flags_of_state",
    "initiator_action",
    "parse_config",
    "snoopee_transition",
    "state_of_flags",
    "__version__",
]
