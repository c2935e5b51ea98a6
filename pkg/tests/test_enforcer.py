import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdnloop.decision import Action
from kdnloop.enforcer import CompileError, ControlEnforcer, compile_action, enforce, ot_adapter

from conftest import diamond_world

ROLES = ["edge-server", "edge-server", "plc", "sensor"]


def redirect(old, new, flow=0):
    touched = {("flow", flow)} | {("link", l) for l in (*old, *new)}
    return Action(0, "flow_redirect", flow, {"old_path": tuple(old), "path": tuple(new), "avoid": old[0]},
                  frozenset(touched))


def realloc(link, delta):
    return Action(0, "bandwidth_realloc", link, {"delta": delta}, frozenset({("link", link)}))


def queue(link, limit):
    return Action(0, "queue_mgmt", link, {"limit": limit}, frozenset({("link", link)}))


def offload(src, dest, amount, src_role="edge-server", dest_role="edge-server"):
    params = {"dest": dest, "amount": amount, "src_role": src_role, "dest_role": dest_role}
    return Action(0, "task_offload", src, params, frozenset({("node", src), ("node", dest)}))


def world():
    return diamond_world(roles=ROLES, task=20.0)


def state(w):
    """Everything a command can change."""
    return ([f.path for f in w.flows], w.capacity.tolist(), w.queue_limit.tolist(), w.task_work.tolist(),
            w.queue_len.tolist(), w.clock)


def catalog():
    """Four applicable actions on the diamond with disjoint effects."""
    return [redirect((0, 2), (1, 3)), realloc(1, 5.0), queue(2, 10.0), offload(0, 1, 4.0)]


def stamped(actions):
    """Compile with distinct action ids, like the enforcer does."""
    out = []
    for aid, a in enumerate(actions):
        out += [c.__class__(len(out) + i, c.adapter, c.verb, c.target, c.payload, 0, aid)
                for i, c in enumerate(compile_action(a))]
    return out


# ---------------------------------------------------------------- compile

def test_three_hop_redirect_compiles_to_six_commands():
    cmds = compile_action(redirect((0, 1, 2), (3, 4, 5)))
    assert len(cmds) == 6
    assert [c.verb for c in cmds] == ["remove_flow_rule"] * 3 + ["install_flow_rule"] * 3
    assert [c.payload["link"] for c in cmds] == [0, 1, 2, 3, 4, 5]
    assert {c.adapter for c in cmds} == {"sdn"}


def test_realloc_compiles_to_one_command():
    (cmd,) = compile_action(realloc(3, 2.5))
    assert (cmd.adapter, cmd.verb, cmd.target, cmd.payload) == ("sdn", "set_capacity", 3, {"delta": 2.5})


def test_offload_adapter_follows_role():
    cmds = compile_action(offload(3, 2, 1.0, src_role="sensor", dest_role="plc"))
    assert [c.adapter for c in cmds] == ["modbus_like", "opcua_like"]
    assert [c.payload["work_delta"] for c in cmds] == [-1.0, 1.0]
    assert ot_adapter("edge-server") == "opcua_like"


@pytest.mark.parametrize("bad", [realloc(0, 0.0), realloc(0, float("nan")), queue(0, -1.0), offload(0, 1, 0.0),
                                 redirect((0,), ())])
def test_malformed_parameters_rejected(bad):
    with pytest.raises(CompileError):
        compile_action(bad)


def _random_action(rng):
    kind = rng.integers(4)
    if kind == 0:
        old = tuple(int(x) for x in rng.choice(20, rng.integers(1, 5), replace=False))
        new = tuple(int(x) for x in rng.choice(20, rng.integers(1, 5), replace=False))
        return redirect(old, new, int(rng.integers(10)))
    if kind == 1:
        return realloc(int(rng.integers(20)), float(rng.uniform(0.1, 5)))
    if kind == 2:
        return queue(int(rng.integers(20)), float(rng.uniform(0, 100)))
    roles = ["plc", "sensor", "edge-server"]
    return offload(int(rng.integers(10)), int(rng.integers(10, 20)), float(rng.uniform(0.1, 5)),
                   roles[rng.integers(3)], roles[rng.integers(3)])


def test_compile_is_deterministic_over_random_actions(rng):
    for _ in range(100):
        a = _random_action(rng)
        assert compile_action(a) == compile_action(a)


# ---------------------------------------------------------------- enforce

def test_all_acks_completion_accounting():
    w = world()
    new, rep = enforce(w, stamped(catalog()))
    assert rep.nacks == 0 and rep.acks == len(rep.outcomes) == 8
    assert rep.completion_tick - rep.dispatch_tick == math.ceil(rep.total_latency_ms / w.dt)
    assert rep.total_latency_ms == pytest.approx(sum(o.latency_ms for o in rep.outcomes))
    assert new.flows[0].path == (1, 3)


def test_latencies_within_adapter_ranges():
    _, rep = enforce(world(), stamped(catalog()))
    for o in rep.outcomes:
        lo, hi = (1.0, 2.0) if o.command.adapter == "sdn" else (3.0, 6.0)
        assert lo <= o.latency_ms <= hi


def test_second_command_nack_rolls_back_first():
    w = world()
    cmds = stamped([redirect((0, 2), (1, 3))])
    new, rep = enforce(w, cmds, fail_positions=[1])
    assert [o.status for o in rep.outcomes] == ["ack", "nack", "nack", "nack"]
    assert rep.outcomes[0].rolled_back
    assert [o.reason for o in rep.outcomes[1:]] == ["injected", "skipped", "skipped"]
    assert len(rep.compensations) == 1
    assert state(new) == state(w)
    assert not rep.action_ok(0)


def test_mixed_batch_matches_single_action_runs():
    w = world()
    acts = [realloc(1, 5.0), offload(0, 1, 4.0)]
    new, rep = enforce(w, stamped(acts), fail_positions=[2])  # offload's second write fails
    alone, _ = enforce(w, stamped(acts[:1]))
    assert state(new) == state(alone)
    assert rep.action_ok(0) and not rep.action_ok(1)


def test_empty_command_list_has_no_effect():
    w = world()
    new, rep = enforce(w, [])
    assert state(new) == state(w)
    assert rep.outcomes == () and rep.completion_tick == rep.dispatch_tick == w.clock


def test_enforce_leaves_input_world_untouched():
    w = world()
    before = state(w)
    enforce(w, stamped(catalog()))
    assert state(w) == before


def test_enforcer_log_rows():
    enf = ControlEnforcer(seed=3)
    w = world()
    _, rep, mapping = enf.execute(w, [realloc(1, 5.0), queue(2, 10.0)])
    enf.feedback(rep)
    assert sorted(mapping) == [0, 1]
    fh = io.StringIO()
    enf.write_log(fh)
    lines = fh.getvalue().splitlines()
    assert lines[0] == "tick,action_id,command_id,adapter,verb,outcome,latency_ms"
    assert lines[1].startswith("0,0,0,sdn,set_capacity,ack,")
    assert len(lines) == 3


@given(st.lists(st.integers(0, 3), min_size=1, max_size=4, unique=True), st.data())
@settings(max_examples=60, deadline=None)
def test_atomicity_with_nack_at_every_position(picks, data):
    w = world()
    acts = [catalog()[i] for i in picks]
    cmds = stamped(acts)
    for pos in range(len(cmds)):
        new, rep = enforce(w, cmds, fail_positions=[pos])
        failed = cmds[pos].action_id
        survivors = [a for i, a in enumerate(acts) if i != failed]
        oracle, _ = enforce(w, stamped(survivors))
        assert state(new) == state(oracle)
        assert rep.failed_actions == {failed}
        assert len(rep.outcomes) == len(cmds)
        assert rep.completion_tick >= rep.dispatch_tick
    extra = data.draw(st.lists(st.integers(0, len(cmds) - 1), max_size=3))
    new, rep = enforce(w, cmds, fail_positions=extra)
    keep = [a for i, a in enumerate(acts) if i not in rep.failed_actions]
    assert state(new) == state(enforce(w, stamped(keep))[0])


def test_enforcer_is_deterministic():
    a = enforce(world(), stamped(catalog()))[1]
    b = enforce(world(), stamped(catalog()))[1]
    assert a == b
    assert np.isfinite(a.total_latency_ms)
