from dataclasses import replace

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdnloop.commands import Command
from kdnloop.decision import link_weights, make_redirect
from kdnloop.enforcer import compile_action, enforce
from kdnloop.sim import (FaultEvent, SimError, TopologySpec, UnknownTargetError, apply_command, build_topology,
                         inject_fault, step)

from conftest import diamond_world, line_world


# ---------------------------------------------------------------- topology

def test_default_topology_has_50_connected_nodes():
    topo = build_topology(TopologySpec(), seed=7)
    assert topo.n_nodes == 50
    assert nx.is_connected(topo.graph)


def test_two_switches_give_one_link():
    topo = build_topology(TopologySpec(node_count=2, role_mix={"switch": 1.0}), seed=0)
    assert topo.n_nodes == 2
    assert topo.n_links == 1


def test_topology_is_deterministic():
    a = build_topology(TopologySpec(node_count=10), seed=3)
    b = build_topology(TopologySpec(node_count=10), seed=3)
    assert repr(a).encode() == repr(b).encode()


@pytest.mark.parametrize("spec", [TopologySpec(node_count=1),
                                  TopologySpec(role_mix={"switch": 0.5, "plc": 0.4})])
def test_bad_topology_spec_rejected(spec):
    with pytest.raises(SimError):
        build_topology(spec, 0)


@given(st.integers(2, 40), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_generated_topology_invariants(n, seed):
    topo = build_topology(TopologySpec(node_count=n), seed)
    assert nx.is_connected(topo.graph)
    assert [x.id for x in topo.nodes] == list(range(n))
    assert all(l.capacity > 0 and l.base_delay >= 0 for l in topo.links)
    assert all(x.cpu_capacity > 0 for x in topo.nodes)


# ---------------------------------------------------------------- step

def test_idle_link_keeps_empty_queue_and_base_delay():
    w = step(line_world(rate=0.0))
    assert w.queue_len.tolist() == [0.0, 0.0]
    assert np.allclose(w.link_delays(), w.topology.base_delay)


def test_queue_recursion_single_tick():
    w = line_world(caps=(20.0, 4.0), rate=3.0)
    w.queue_len[1] = 5.0
    assert step(w).queue_len[1] == 4.0


def test_line_queue_grows_by_four_per_tick():
    # hand-iterated q' = max(0, q + 10 - 6) from q = 0
    oracle = [0.0]
    for _ in range(4):
        oracle.append(max(0.0, oracle[-1] + 10.0 - 6.0))
    w = line_world()
    seen = []
    for _ in range(5):
        seen.append(float(w.queue_len[1]))
        w = step(w)
    assert seen == oracle == [0.0, 4.0, 8.0, 12.0, 16.0]


def test_clock_advances_by_one():
    w = line_world()
    for t in range(1, 4):
        w = step(w)
        assert w.clock == t


def test_step_does_not_mutate_input():
    w = line_world()
    q = w.queue_len.copy()
    step(w)
    assert np.array_equal(w.queue_len, q)


def test_buffer_limit_caps_queue():
    w = line_world(buffer=5.0)
    for _ in range(4):
        w = step(w)
    assert w.queue_len[1] == 5.0
    assert w.flow_delivered[0] == pytest.approx(6.0)


# ---------------------------------------------------------------- faults

def test_link_degradation_halves_capacity_in_window():
    w = line_world(caps=(20.0, 8.0))
    w = inject_fault(w, FaultEvent("link_degradation", 1, start_tick=2, duration_ticks=3, magnitude=0.5))
    caps = [float(w.effective(t).capacity[1]) for t in range(7)]
    assert caps == [8.0, 8.0, 4.0, 4.0, 4.0, 8.0, 8.0]


def test_node_failure_downs_incident_links():
    w = inject_fault(diamond_world(), FaultEvent("node_failure", 1, 0, 5))
    eff = w.effective()
    assert not eff.link_up[0] and not eff.link_up[2]
    assert eff.link_up[1] and eff.link_up[3]
    assert eff.cpu_capacity[1] == 0.0


def test_overlapping_fluctuations_multiply():
    w = line_world(rate=2.0)
    w = inject_fault(w, FaultEvent("load_fluctuation", 0, 0, 10, 1.5))
    w = inject_fault(w, FaultEvent("load_fluctuation", 0, 5, 10, 2.0))
    oracle = {t: 2.0 * (1.5 if t < 10 else 1.0) * (2.0 if 5 <= t < 15 else 1.0) for t in range(16)}
    assert w.effective(7).rates[0] == pytest.approx(2.0 * 3.0)
    for t, r in oracle.items():
        assert w.effective(t).rates[0] == pytest.approx(r)


@pytest.mark.parametrize("kind,target,what", [("link_degradation", 9, "link"), ("node_failure", 99, "node"),
                                              ("load_fluctuation", 3, "flow")])
def test_unknown_fault_target_rejected(kind, target, what):
    with pytest.raises(UnknownTargetError, match=f"{what}.*{target}"):
        inject_fault(line_world(), FaultEvent(kind, target, 0, 1, 0.5))


@given(st.sampled_from(["link_degradation", "node_failure", "load_fluctuation"]),
       st.integers(0, 8), st.integers(1, 8), st.floats(0.1, 3.0))
@settings(max_examples=30, deadline=None)
def test_fault_expiry_restores_static_parameters(kind, start, duration, magnitude):
    target = {"link_degradation": 1, "node_failure": 1, "load_fluctuation": 0}[kind]
    clean = diamond_world()
    w = inject_fault(clean, FaultEvent(kind, target, start, duration, magnitude))
    for _ in range(start + duration):
        w = step(w)
        clean = step(clean)
    a, b = w.effective(), clean.effective()
    for field in ("capacity", "link_up", "rates", "cpu_capacity", "node_up"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field


# ---------------------------------------------------------------- commands

def _redirect(world):
    return make_redirect(world, 0, 0, link_weights(world)).with_id(0)


def test_reroute_to_alternate_path_acks():
    w = diamond_world()
    action = _redirect(w)
    new, report = enforce(w, compile_action(action))
    assert report.nacks == 0
    assert new.flows[0].path == (1, 3)
    assert w.flows[0].path == (0, 2)


def test_reroute_onto_down_link_nacks_and_leaves_state():
    w = diamond_world()
    action = _redirect(w)
    w = inject_fault(w, FaultEvent("node_failure", 2, 0, 5))
    new, report = enforce(w, compile_action(action))
    reasons = [o.reason for o in report.outcomes if o.status == "nack"]
    assert reasons[0] == "infeasible"
    assert new.flows[0].path == (0, 2)


def test_install_on_down_link_nacks_infeasible():
    w = inject_fault(diamond_world(), FaultEvent("node_failure", 2, 0, 5))
    w.flows[0] = replace(w.flows[0], path=(0,))  # partial walk ending at node 1
    snapshot = list(w.flows)
    res = apply_command(w, Command(0, "sdn", "install_flow_rule", 0, {"link": 3}))
    assert not res.ok and res.reason == "infeasible"
    assert w.flows == snapshot


def test_bandwidth_realloc_adds_capacity():
    w = line_world(caps=(20.0, 8.0))
    res = apply_command(w, Command(0, "sdn", "set_capacity", 1, {"delta": 2.0}))
    assert res.ok
    assert w.capacity[1] == 10.0


def test_realloc_beyond_headroom_nacks():
    w = line_world(caps=(20.0, 8.0))
    res = apply_command(w, Command(0, "sdn", "set_capacity", 1, {"delta": 100.0}))
    assert not res.ok and res.reason == "infeasible"
    assert w.capacity[1] == 8.0


def test_unknown_command_target_nacks():
    w = line_world()
    res = apply_command(w, Command(0, "sdn", "set_queue_policy", 42, {"limit": 1.0}))
    assert not res.ok and res.reason == "unknown_target"


def test_setpoint_on_failed_node_nacks():
    w = inject_fault(line_world(), FaultEvent("node_failure", 1, 0, 5))
    res = apply_command(w, Command(0, "opcua_like", "write_setpoint", 1, {"work_delta": 1.0}))
    assert not res.ok and res.reason == "target_down"


def test_ack_carries_exact_undo():
    w = line_world()
    before = w.copy()
    res = apply_command(w, Command(0, "sdn", "set_queue_policy", 1, {"limit": 3.0}))
    assert w.queue_limit[1] == 3.0
    apply_command(w, res.undo)
    assert np.array_equal(w.queue_limit, before.queue_limit)


# ---------------------------------------------------------------- properties

_ops = st.lists(st.one_of(
    st.tuples(st.just("step")),
    st.tuples(st.just("cap"), st.integers(0, 3), st.floats(-20, 20)),
    st.tuples(st.just("queue"), st.integers(0, 3), st.floats(0, 50)),
    st.tuples(st.just("work"), st.integers(0, 3), st.floats(-50, 50)),
), max_size=25)


def _apply_op(w, op):
    if op[0] == "step":
        return step(w)
    if op[0] == "cap":
        apply_command(w, Command(0, "sdn", "set_capacity", op[1], {"delta": op[2]}))
    elif op[0] == "queue":
        apply_command(w, Command(0, "sdn", "set_queue_policy", op[1], {"limit": op[2]}))
    else:
        apply_command(w, Command(0, "opcua_like", "write_setpoint", op[1], {"work_delta": op[2]}))
    return w


@given(_ops, st.floats(0.0, 40.0))
@settings(max_examples=60, deadline=None)
def test_queues_and_cpu_stay_in_range(ops, rate):
    w = diamond_world(rate=rate, roles=["plc", "sensor", "plc", "edge-server"], task=5.0)
    for op in ops:
        w = _apply_op(w, op)
        assert (w.queue_len >= 0).all()
        assert ((w.cpu_load >= 0) & (w.cpu_load <= 1)).all()


@given(_ops)
@settings(max_examples=30, deadline=None)
def test_trajectories_are_deterministic(ops):
    def run():
        w = inject_fault(diamond_world(), FaultEvent("link_degradation", 0, 2, 4, 0.3))
        out = []
        for op in ops + [("step",)]:
            w = _apply_op(w, op)
            out.append((w.clock, w.queue_len.tobytes(), w.cpu_load.tobytes(), w.capacity.tobytes()))
        return out
    assert run() == run()


def test_reroute_moves_arrivals_without_duplication():
    w = diamond_world(rate=7.0)
    assert w.link_arrivals().tolist() == [7.0, 0.0, 7.0, 0.0]
    new, _ = enforce(w, compile_action(_redirect(w)))
    arr = new.link_arrivals()
    assert arr.tolist() == [0.0, 7.0, 0.0, 7.0]
    assert arr.sum() == 7.0 * len(new.flows[0].path)
