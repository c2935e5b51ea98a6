"""Low-level control commands shared by the simulator and the enforcer."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ADAPTER_VERBS = {
    "sdn": frozenset({"install_flow_rule", "remove_flow_rule", "set_capacity", "set_queue_policy"}),
    "opcua_like": frozenset({"write_setpoint"}),
    "modbus_like": frozenset({"write_setpoint"}),
}

# payload keys required per verb; compensating commands add "restore" and "value"
VERB_PAYLOAD = {
    "install_flow_rule": {"link"},
    "remove_flow_rule": {"link"},
    "set_capacity": {"delta"},
    "set_queue_policy": {"limit"},
    "write_setpoint": {"work_delta"},
}

# simulated per-command execution latency, ms (uniform)
ADAPTER_LATENCY_MS = {
    "sdn": (1.0, 2.0),
    "opcua_like": (3.0, 6.0),
    "modbus_like": (3.0, 6.0),
}

NACK_REASONS = ("target_down", "unknown_target", "infeasible", "injected", "skipped")


@dataclass(frozen=True)
class Command:
    id: int
    adapter: str
    verb: str
    target: int
    payload: dict = field(default_factory=dict)
    issued_tick: int = 0
    action_id: int = -1

    def __post_init__(self):
        if self.adapter not in ADAPTER_VERBS:
            raise ValueError(f"unknown adapter {self.adapter!r}")
        if self.verb not in ADAPTER_VERBS[self.adapter]:
            raise ValueError(f"verb {self.verb!r} not valid on adapter {self.adapter!r}")
        keys = set(self.payload) - {"restore", "position", "value"}
        if keys != VERB_PAYLOAD[self.verb]:
            raise ValueError(f"payload for {self.verb} must have keys {sorted(VERB_PAYLOAD[self.verb])}, got {sorted(keys)}")

    def __hash__(self):
        return hash((self.id, self.adapter, self.verb, self.target,
                     tuple(sorted(self.payload.items())), self.issued_tick, self.action_id))


@dataclass(frozen=True)
class CommandResult:
    ok: bool
    latency_ms: float
    reason: Optional[str] = None
    undo: Optional[Command] = None

    @property
    def status(self):
        return "ack" if self.ok else "nack"


def adapter_latency(seed: int, tick: int, cmd: Command) -> float:
    """Deterministic latency draw keyed on (run seed, tick, command id)."""
    lo, hi = ADAPTER_LATENCY_MS[cmd.adapter]
    rng = np.random.default_rng((int(seed) & 0xFFFFFFFF, int(tick), int(cmd.id) & 0xFFFFFFFF))
    return float(rng.uniform(lo, hi))
