"""Action -> command compilation and atomic enforcement against the simulator."""

import csv
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .commands import Command, adapter_latency
from .sim import WorldState, apply_command


class CompileError(ValueError):
    pass


def ot_adapter(role: str) -> str:
    return "modbus_like" if role == "sensor" else "opcua_like"


def compile_action(action) -> list:
    """Deterministic command sequence for one action (pure function of the action)."""
    p = action.parameters
    aid = action.id
    if action.kind == "flow_redirect":
        old, new = tuple(p["old_path"]), tuple(p["path"])
        if not old or not new:
            raise CompileError("redirect needs non-empty old and new paths")
        cmds = [("sdn", "remove_flow_rule", action.target, {"link": int(l)}) for l in old]
        cmds += [("sdn", "install_flow_rule", action.target, {"link": int(l)}) for l in new]
    elif action.kind == "bandwidth_realloc":
        if not np.isfinite(p["delta"]) or p["delta"] == 0:
            raise CompileError("realloc delta must be finite and non-zero")
        cmds = [("sdn", "set_capacity", action.target, {"delta": float(p["delta"])})]
    elif action.kind == "queue_mgmt":
        if not p["limit"] >= 0:
            raise CompileError("queue limit must be >= 0")
        cmds = [("sdn", "set_queue_policy", action.target, {"limit": float(p["limit"])})]
    elif action.kind == "task_offload":
        amount = float(p["amount"])
        if not amount > 0:
            raise CompileError("offload amount must be > 0")
        cmds = [(ot_adapter(p["src_role"]), "write_setpoint", action.target, {"work_delta": -amount}),
                (ot_adapter(p["dest_role"]), "write_setpoint", int(p["dest"]), {"work_delta": amount})]
    else:
        raise CompileError(f"unknown action kind {action.kind!r}")
    return [Command(i, a, v, int(t), pl, 0, aid) for i, (a, v, t, pl) in enumerate(cmds)]


@dataclass(frozen=True)
class CommandOutcome:
    command: Command
    status: str
    latency_ms: float
    reason: Optional[str] = None
    rolled_back: bool = False


@dataclass(frozen=True)
class EnforcementReport:
    outcomes: tuple
    dispatch_tick: int
    completion_tick: int
    total_latency_ms: float
    compensations: tuple = ()
    failed_actions: frozenset = frozenset()

    @property
    def acks(self):
        return sum(o.status == "ack" for o in self.outcomes)

    @property
    def nacks(self):
        return sum(o.status == "nack" for o in self.outcomes)

    def action_ok(self, action_id: int) -> bool:
        return action_id not in self.failed_actions

    def first_latency(self, action_id: int) -> float:
        for o in self.outcomes:
            if o.command.action_id == action_id:
                return o.latency_ms
        return 0.0


def _groups(commands):
    out = []
    for cmd in commands:
        if out and out[-1][0].action_id == cmd.action_id:
            out[-1].append(cmd)
        else:
            out.append([cmd])
    return out


def enforce(world: WorldState, commands, fail_positions=(), error_rate: float = 0.0,
            rng: Optional[np.random.Generator] = None):
    """Apply ``commands`` in order; returns ``(new_world, report)``.

    Consecutive commands sharing an ``action_id`` form one action. On the first
    nack of an action its remaining commands are skipped and its applied ones
    are compensated in reverse order, so each action lands whole or not at all.
    ``fail_positions`` (indices into ``commands``) and ``error_rate`` inject
    adapter errors.
    """
    new = world.copy()
    eff = new.effective()
    fail_positions = set(fail_positions)
    outcomes, comps, failed = [], [], set()
    total = 0.0
    pos = 0
    for group in _groups(commands):
        undo, start = [], len(outcomes)
        broken = False
        for cmd in group:
            if broken:
                outcomes.append(CommandOutcome(cmd, "nack", 0.0, "skipped"))
                pos += 1
                continue
            injected = pos in fail_positions or (error_rate > 0 and rng is not None and rng.random() < error_rate)
            if injected:
                lat = adapter_latency(new.rng_seed, new.clock, cmd)
                outcomes.append(CommandOutcome(cmd, "nack", lat, "injected"))
            else:
                res = apply_command(new, cmd, eff)
                lat = res.latency_ms
                outcomes.append(CommandOutcome(cmd, res.status, lat, res.reason))
                if res.ok:
                    undo.append(res.undo)
            total += lat
            pos += 1
            if outcomes[-1].status == "nack":
                broken = True
                failed.add(cmd.action_id)
                for u in reversed(undo):
                    r = apply_command(new, u, eff)
                    if not r.ok:  # pragma: no cover - compensations bypass feasibility checks
                        raise RuntimeError(f"compensation failed: {u}")
                    comps.append(CommandOutcome(u, "ack", r.latency_ms))
                    total += r.latency_ms
                for i in range(start, len(outcomes)):
                    if outcomes[i].status == "ack":
                        outcomes[i] = replace(outcomes[i], rolled_back=True)
    dispatch = world.clock
    completion = dispatch + int(math.ceil(total / world.dt - 1e-12)) if total > 0 else dispatch
    return new, EnforcementReport(tuple(outcomes), dispatch, completion, total, tuple(comps), frozenset(failed))


ENFORCEMENT_HEADER = ("tick", "action_id", "command_id", "adapter", "verb", "outcome", "latency_ms")


class ControlEnforcer:
    """Stamps run-unique command ids, enforces action sets and logs outcomes."""

    def __init__(self, seed: int = 0, error_rate: float = 0.0):
        self.error_rate = error_rate
        self.rng = np.random.default_rng((int(seed), 0xE4F))
        self._next_cmd = 0
        self._next_action = 0
        self.log = []

    def compile(self, actions, tick: int) -> tuple:
        """Compiled commands for an action set plus ``{run_action_id: action}``."""
        cmds, mapping = [], {}
        for a in actions:
            aid = self._next_action
            self._next_action += 1
            mapping[aid] = a
            for c in compile_action(a):
                cmds.append(replace(c, id=self._next_cmd, issued_tick=tick, action_id=aid))
                self._next_cmd += 1
        return cmds, mapping

    def execute(self, world: WorldState, actions):
        cmds, mapping = self.compile(actions, world.clock)
        new, report = enforce(world, cmds, error_rate=self.error_rate, rng=self.rng)
        return new, report, mapping

    def feedback(self, report: EnforcementReport, collector=None):
        for o in report.outcomes:
            c = o.command
            outcome = o.status if o.reason is None else f"nack:{o.reason}"
            if o.rolled_back:
                outcome = "ack:rolled_back"
            self.log.append((report.dispatch_tick, c.action_id, c.id, c.adapter, c.verb, outcome,
                             f"{o.latency_ms:.4f}"))
        if collector is not None:
            collector.ingest(report)

    def write_log(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENFORCEMENT_HEADER)
        w.writerows(self.log)
