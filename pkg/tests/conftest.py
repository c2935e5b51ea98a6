"""Small hand-built worlds shared by the unit tests."""

import numpy as np
import pytest

from kdnloop.sim import ROLE_CPU, Flow, LinkSpec, NodeSpec, SimParams, Topology, make_world


def make_topology(n_nodes, edges, caps, roles=None, base_delay=1.0, headroom=1.5, task=0.0):
    roles = roles or ["switch"] * n_nodes
    nodes = tuple(NodeSpec(i, r, ROLE_CPU[r][0], task) for i, r in enumerate(roles))
    links = tuple(LinkSpec(i, e, c, base_delay, True, "ip", c * headroom) for i, (e, c) in enumerate(zip(edges, caps)))
    return Topology(nodes, links)


def line_world(caps=(20.0, 6.0), rate=10.0, buffer=400.0, **kw):
    """0 - 1 - 2 with one flow 0 -> 2."""
    topo = make_topology(3, [(0, 1), (1, 2)], caps, **kw)
    return make_world(topo, [Flow(0, 0, 2, (0, 1), rate)], SimParams(buffer_packets=buffer))


def diamond_world(top_cap=5.0, bottom_cap=50.0, rate=10.0, buffer=400.0, roles=None, task=0.0):
    """0 -(0)- 1 -(2)- 3 on top, 0 -(1)- 2 -(3)- 3 below; one flow over the top."""
    topo = make_topology(4, [(0, 1), (0, 2), (1, 3), (2, 3)], [top_cap, bottom_cap, top_cap, bottom_cap],
                         roles=roles, task=task)
    return make_world(topo, [Flow(0, 0, 3, (0, 2), rate)], SimParams(buffer_packets=buffer))


@pytest.fixture
def line():
    return line_world()


@pytest.fixture
def diamond():
    return diamond_world()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> PASS/FAIL line, filled by the acceptance suite
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
