"""Deterministic fluid model of a converged IT/OT network.

The world advances in ticks of ``dt`` ms. Each link carries one FIFO fluid
queue updated as ``q' = min(limit, max(0, q + arrivals - capacity))``; link
delay is ``base_delay + q / capacity * dt`` ms. Nodes spend CPU on their own
task work plus forwarding work for every flow they carry.

Node and link ids are their index in the topology tuples. Flow ids are their
index in ``WorldState.flows``.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import networkx as nx
import numpy as np

from . import kernels
from .commands import Command, CommandResult, adapter_latency

ROLES = ("plc", "sensor", "edge-server", "enterprise", "switch")
OT_ROLES = frozenset({"plc", "sensor"})
DEFAULT_ROLE_MIX = {"sensor": 0.3, "plc": 0.2, "switch": 0.2, "edge-server": 0.2, "enterprise": 0.1}
FAULT_KINDS = ("load_fluctuation", "link_degradation", "node_failure")

# per-role (cpu capacity work-units/tick, nominal task work work-units/tick)
ROLE_CPU = {
    "plc": (40.0, 18.0),
    "sensor": (15.0, 5.0),
    "switch": (300.0, 0.0),
    "edge-server": (200.0, 90.0),
    "enterprise": (150.0, 60.0),
}


class SimError(ValueError):
    pass


class UnknownTargetError(SimError):
    def __init__(self, kind, target):
        super().__init__(f"unknown {kind} target id {target!r}")
        self.kind = kind
        self.target = target


@dataclass(frozen=True)
class LinkClass:
    capacity: float
    base_delay: float


@dataclass(frozen=True)
class TopologySpec:
    node_count: int = 50
    role_mix: dict = field(default_factory=lambda: dict(DEFAULT_ROLE_MIX))
    radius: float = 0.18
    fieldbus: LinkClass = LinkClass(capacity=20.0, base_delay=0.5)
    ip: LinkClass = LinkClass(capacity=60.0, base_delay=2.0)
    capacity_jitter: float = 0.2
    headroom: float = 1.5

    def validate(self):
        if self.node_count < 2:
            raise SimError(f"node_count must be >= 2, got {self.node_count}")
        unknown = set(self.role_mix) - set(ROLES)
        if unknown:
            raise SimError(f"unknown roles in role_mix: {sorted(unknown)}")
        if any(v < 0 for v in self.role_mix.values()):
            raise SimError("role fractions must be non-negative")
        total = sum(self.role_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise SimError(f"role fractions must sum to 1, got {total!r}")


@dataclass(frozen=True)
class NodeSpec:
    id: int
    role: str
    cpu_capacity: float
    task_work: float = 0.0
    pos: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class LinkSpec:
    id: int
    endpoints: tuple
    capacity: float
    base_delay: float
    up: bool = True
    kind: str = "ip"
    max_capacity: Optional[float] = None

    def other(self, node):
        a, b = self.endpoints
        return b if node == a else a


@dataclass(frozen=True)
class Topology:
    nodes: tuple
    links: tuple

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise SimError("node ids must be 0..n-1 in order")
        if [l.id for l in self.links] != list(range(len(self.links))):
            raise SimError("link ids must be 0..m-1 in order")
        seen = set()
        for n in self.nodes:
            if n.role not in ROLES:
                raise SimError(f"node {n.id}: unknown role {n.role!r}")
            if not n.cpu_capacity > 0:
                raise SimError(f"node {n.id}: cpu_capacity must be > 0")
        for l in self.links:
            a, b = l.endpoints
            if not (0 <= a < len(ids) and 0 <= b < len(ids)) or a == b:
                raise SimError(f"link {l.id}: bad endpoints {l.endpoints}")
            if not l.capacity > 0:
                raise SimError(f"link {l.id}: capacity must be > 0")
            if l.base_delay < 0:
                raise SimError(f"link {l.id}: base_delay must be >= 0")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise SimError(f"link {l.id}: duplicate link between {a} and {b}")
            seen.add(key)
        if not nx.is_connected(self.graph):
            raise SimError("topology is not connected")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_links(self):
        return len(self.links)

    @cached_property
    def graph(self):
        g = nx.Graph()
        g.add_nodes_from(range(len(self.nodes)))
        for l in self.links:
            g.add_edge(*l.endpoints, link=l.id)
        return g

    @cached_property
    def incident(self):
        inc = [[] for _ in self.nodes]
        for l in self.links:
            a, b = l.endpoints
            inc[a].append(l.id)
            inc[b].append(l.id)
        return tuple(tuple(x) for x in inc)

    @cached_property
    def link_index(self):
        return {(min(l.endpoints), max(l.endpoints)): l.id for l in self.links}

    @cached_property
    def endpoints(self):
        return np.array([l.endpoints for l in self.links], dtype=np.int64).reshape(-1, 2)

    @cached_property
    def base_delay(self):
        return np.array([l.base_delay for l in self.links], dtype=np.float64)

    @cached_property
    def max_capacity(self):
        return np.array([l.max_capacity if l.max_capacity is not None else l.capacity
                         for l in self.links], dtype=np.float64)

    @cached_property
    def roles(self):
        return tuple(n.role for n in self.nodes)


def _role_counts(n, mix):
    # largest-remainder apportionment, ties broken by ROLES order
    raw = [(mix.get(r, 0.0) * n, r) for r in ROLES]
    counts = {r: int(np.floor(x)) for x, r in raw}
    left = n - sum(counts.values())
    order = sorted(raw, key=lambda xr: (-(xr[0] - np.floor(xr[0])), ROLES.index(xr[1])))
    for _, r in order[:left]:
        counts[r] += 1
    return counts


def build_topology(spec: TopologySpec = TopologySpec(), seed: int = 0) -> Topology:
    """Random geometric graph on the unit square, repaired to be connected."""
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.node_count
    pos = rng.random((n, 2))
    counts = _role_counts(n, spec.role_mix)
    roles = [r for r in ROLES for _ in range(counts[r])]
    roles = [roles[i] for i in rng.permutation(n)]

    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if d[i, j] <= spec.radius]

    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(pairs)
    while not nx.is_connected(g):
        comp = np.array(sorted(nx.node_connected_component(g, 0)))
        rest = np.setdiff1d(np.arange(n), comp)
        sub = d[np.ix_(comp, rest)]
        i, j = np.unravel_index(np.argmin(sub), sub.shape)
        a, b = int(comp[i]), int(rest[j])
        pairs.append((min(a, b), max(a, b)))
        g.add_edge(a, b)

    nodes = []
    for i in range(n):
        cpu, work = ROLE_CPU[roles[i]]
        nodes.append(NodeSpec(i, roles[i], cpu, round(work * rng.uniform(0.7, 1.1), 3),
                              (round(float(pos[i, 0]), 6), round(float(pos[i, 1]), 6))))
    links = []
    for lid, (a, b) in enumerate(sorted(pairs)):
        kind = "fieldbus" if roles[a] in OT_ROLES or roles[b] in OT_ROLES else "ip"
        cls = spec.fieldbus if kind == "fieldbus" else spec.ip
        jit = 1.0 + spec.capacity_jitter * (2.0 * rng.random() - 1.0)
        cap = round(cls.capacity * jit, 3)
        links.append(LinkSpec(lid, (a, b), cap, cls.base_delay, True, kind,
                              round(cap * spec.headroom, 3)))
    return Topology(tuple(nodes), tuple(links))


@dataclass(frozen=True)
class Flow:
    id: int
    src: int
    dst: int
    path: tuple
    offered_rate: float
    priority: int = 0


def path_nodes(topology: Topology, src: int, path) -> list:
    """Nodes visited by a link path starting at ``src``; raises on a broken walk."""
    nodes = [src]
    cur = src
    for lid in path:
        a, b = topology.links[lid].endpoints
        if cur == a:
            cur = b
        elif cur == b:
            cur = a
        else:
            raise SimError(f"path not contiguous at link {lid}")
        nodes.append(cur)
    return nodes


def check_flow(topology: Topology, flow: Flow):
    if flow.offered_rate < 0:
        raise SimError(f"flow {flow.id}: offered_rate must be >= 0")
    if not flow.path:
        raise SimError(f"flow {flow.id}: empty path")
    nodes = path_nodes(topology, flow.src, flow.path)
    if nodes[-1] != flow.dst:
        raise SimError(f"flow {flow.id}: path ends at {nodes[-1]}, not {flow.dst}")


def hop_path(topology: Topology, src: int, dst: int) -> tuple:
    nodes = nx.shortest_path(topology.graph, src, dst)
    return tuple(topology.link_index[(min(a, b), max(a, b))] for a, b in zip(nodes, nodes[1:]))


def generate_flows(topology: Topology, count: int, rate_range=(4.0, 10.0), seed: int = 0,
                   it_to_ot_share: float = 0.25) -> list:
    """OT->IT telemetry flows plus a share of IT->OT control flows, hop-shortest paths."""
    rng = np.random.default_rng(seed)
    ot = [n.id for n in topology.nodes if n.role in OT_ROLES]
    it = [n.id for n in topology.nodes if n.role in ("edge-server", "enterprise")]
    if not ot or not it:
        ot = it = list(range(topology.n_nodes))
    flows = []
    n_down = int(round(count * it_to_ot_share))
    for i in range(count):
        while True:
            if i < count - n_down:
                src, dst = int(rng.choice(ot)), int(rng.choice(it))
            else:
                src, dst = int(rng.choice(it)), int(rng.choice(ot))
            if src != dst:
                break
        rate = round(float(rng.uniform(*rate_range)), 3)
        flows.append(Flow(i, src, dst, hop_path(topology, src, dst), rate, int(i >= count - n_down)))
    return flows


@dataclass(frozen=True)
class FaultEvent:
    kind: str
    target: int
    start_tick: int
    duration_ticks: int
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise SimError(f"unknown fault kind {self.kind!r}")
        if self.duration_ticks < 1:
            raise SimError("duration_ticks must be >= 1")
        if not self.magnitude > 0:
            raise SimError("magnitude must be > 0")

    @property
    def end_tick(self):
        return self.start_tick + self.duration_ticks

    def active(self, tick):
        return self.start_tick <= tick < self.end_tick


@dataclass(frozen=True)
class SimParams:
    dt: float = 10.0
    penalty_delay: float = 150.0
    buffer_packets: float = 400.0
    fwd_work: float = 0.5
    proc_delay: float = 0.2


@dataclass
class Effective:
    capacity: np.ndarray
    link_up: np.ndarray
    rates: np.ndarray
    cpu_capacity: np.ndarray
    node_up: np.ndarray


@dataclass
class WorldState:
    topology: Topology
    flows: list
    queue_len: np.ndarray
    cpu_load: np.ndarray
    capacity: np.ndarray
    queue_limit: np.ndarray
    task_work: np.ndarray
    clock: int = 0
    dt: float = 10.0
    active_faults: list = field(default_factory=list)
    rng_seed: int = 0
    params: SimParams = SimParams()
    flow_delay: Optional[np.ndarray] = None
    flow_delivered: Optional[np.ndarray] = None

    def copy(self) -> "WorldState":
        return replace(
            self,
            flows=list(self.flows),
            queue_len=self.queue_len.copy(),
            cpu_load=self.cpu_load.copy(),
            capacity=self.capacity.copy(),
            queue_limit=self.queue_limit.copy(),
            task_work=self.task_work.copy(),
            active_faults=list(self.active_faults),
            flow_delay=None if self.flow_delay is None else self.flow_delay.copy(),
            flow_delivered=None if self.flow_delivered is None else self.flow_delivered.copy(),
        )

    def effective(self, tick: Optional[int] = None) -> Effective:
        """Parameters in force at ``tick`` (default: the current clock) after faults."""
        t = self.clock if tick is None else tick
        topo = self.topology
        link_mult = np.ones(topo.n_links)
        rate_mult = np.ones(len(self.flows))
        node_up = np.ones(topo.n_nodes, dtype=bool)
        for fault in self.active_faults:
            if not fault.active(t):
                continue
            if fault.kind == "link_degradation":
                link_mult[fault.target] *= fault.magnitude
            elif fault.kind == "load_fluctuation":
                rate_mult[fault.target] *= fault.magnitude
            else:
                node_up[fault.target] = False
        link_up = np.array([l.up for l in topo.links], dtype=bool)
        if not node_up.all():
            ends = topo.endpoints
            link_up &= node_up[ends[:, 0]] & node_up[ends[:, 1]]
        rates = np.array([f.offered_rate for f in self.flows], dtype=np.float64) * rate_mult
        cpu = np.array([n.cpu_capacity for n in topo.nodes], dtype=np.float64)
        return Effective(self.capacity * link_mult, link_up, rates, np.where(node_up, cpu, 0.0), node_up)

    def link_delays(self, eff: Optional[Effective] = None) -> np.ndarray:
        eff = eff or self.effective()
        live = eff.link_up & (eff.capacity > 0)
        cap = np.where(live, eff.capacity, 1.0)
        return np.where(live, self.topology.base_delay + self.queue_len / cap * self.dt,
                        self.params.penalty_delay)

    def link_arrivals(self, eff: Optional[Effective] = None) -> np.ndarray:
        eff = eff or self.effective()
        arr = np.zeros(self.topology.n_links)
        for f, rate in zip(self.flows, eff.rates):
            for lid in f.path:
                arr[lid] += rate
        return arr

    def flows_on_link(self, lid: int) -> list:
        return [f.id for f in self.flows if lid in f.path]

    def mean_delay(self) -> float:
        """Mean delay per delivered packet; unweighted over flows when nothing is delivered."""
        if self.flow_delay is None or not len(self.flow_delay):
            return 0.0
        w = self.flow_delivered
        total = float(w.sum()) if w is not None else 0.0
        if total <= 0:
            return float(self.flow_delay.mean())
        return float(np.dot(self.flow_delay, w) / total)

    def throughput(self) -> float:
        return float(self.flow_delivered.sum()) if self.flow_delivered is not None else 0.0


@dataclass
class FluidModel:
    """Flat array view of a world, ready for the kernels. Cheap to clone."""

    q: np.ndarray
    capacity: np.ndarray
    link_up: np.ndarray
    queue_limit: np.ndarray
    base_delay: np.ndarray
    rates: np.ndarray
    paths: list
    srcs: list
    task_work: np.ndarray
    cpu_capacity: np.ndarray
    node_up: np.ndarray
    params: SimParams
    topology: Topology

    @classmethod
    def from_world(cls, world: WorldState, tick: Optional[int] = None) -> "FluidModel":
        eff = world.effective(tick)
        return cls(world.queue_len.copy(), eff.capacity, eff.link_up, world.queue_limit.copy(),
                   world.topology.base_delay, eff.rates, [f.path for f in world.flows],
                   [f.src for f in world.flows], world.task_work.copy(), eff.cpu_capacity,
                   eff.node_up, world.params, world.topology)

    def clone(self) -> "FluidModel":
        return replace(self, q=self.q.copy(), capacity=self.capacity.copy(),
                       queue_limit=self.queue_limit.copy(), rates=self.rates.copy(),
                       paths=list(self.paths), task_work=self.task_work.copy())

    def csr(self):
        path_ptr = np.zeros(len(self.paths) + 1, dtype=np.int64)
        node_ptr = np.zeros(len(self.paths) + 1, dtype=np.int64)
        links, nodes = [], []
        for i, (src, path) in enumerate(zip(self.srcs, self.paths)):
            links.extend(path)
            nodes.extend(path_nodes(self.topology, src, path))
            path_ptr[i + 1] = len(links)
            node_ptr[i + 1] = len(nodes)
        return (path_ptr, np.asarray(links, dtype=np.int64),
                node_ptr, np.asarray(nodes, dtype=np.int64))

    def advance(self, n_ticks: int):
        """Run ``n_ticks`` of the fluid model; returns (q, cpu, delay[t, f], delivered[t, f])."""
        p = self.params
        path_ptr, path_links, node_ptr, pnodes = self.csr()
        return kernels.advance(self.q, self.capacity, self.link_up, self.queue_limit, self.base_delay,
                               self.rates, path_ptr, path_links, node_ptr, pnodes, self.task_work,
                               self.cpu_capacity, self.node_up, float(p.dt), float(p.penalty_delay),
                               float(p.fwd_work), float(p.proc_delay), int(n_ticks))

    def observe(self):
        """(cpu, delay[f], delivered[f]) for the current queues, no queue update."""
        p = self.params
        path_ptr, path_links, node_ptr, pnodes = self.csr()
        return kernels.observe(self.q, self.capacity, self.link_up, self.base_delay, self.rates,
                               path_ptr, path_links, node_ptr, pnodes, self.task_work,
                               self.cpu_capacity, self.node_up, float(p.dt), float(p.penalty_delay),
                               float(p.fwd_work), float(p.proc_delay))


def make_world(topology: Topology, flows, params: SimParams = SimParams(), seed: int = 0,
               faults=()) -> WorldState:
    for i, f in enumerate(flows):
        if f.id != i:
            raise SimError("flow ids must be 0..k-1 in order")
        check_flow(topology, f)
    world = WorldState(
        topology=topology,
        flows=list(flows),
        queue_len=np.zeros(topology.n_links),
        cpu_load=np.zeros(topology.n_nodes),
        capacity=np.array([l.capacity for l in topology.links], dtype=np.float64),
        queue_limit=np.full(topology.n_links, float(params.buffer_packets)),
        task_work=np.array([n.task_work for n in topology.nodes], dtype=np.float64),
        dt=params.dt,
        rng_seed=seed,
        params=params,
    )
    for fault in faults:
        world = inject_fault(world, fault)
    _refresh(world)
    return world


def _refresh(world: WorldState):
    cpu, delay, deliv = FluidModel.from_world(world).observe()
    world.cpu_load = cpu
    world.flow_delay = delay
    world.flow_delivered = deliv


def step(world: WorldState) -> WorldState:
    """Advance one tick; faults active at the new clock shape this tick's dynamics."""
    new = world.copy()
    new.clock = world.clock + 1
    new.active_faults = [f for f in world.active_faults if f.end_tick > new.clock]
    q, cpu, delay, deliv = FluidModel.from_world(new).advance(1)
    new.queue_len = q
    new.cpu_load = cpu
    new.flow_delay = delay[0]
    new.flow_delivered = deliv[0]
    return new


def _check_target(world: WorldState, fault: FaultEvent):
    limit = {"link_degradation": world.topology.n_links,
             "node_failure": world.topology.n_nodes,
             "load_fluctuation": len(world.flows)}[fault.kind]
    if not (isinstance(fault.target, (int, np.integer)) and 0 <= fault.target < limit):
        kind = {"link_degradation": "link", "node_failure": "node", "load_fluctuation": "flow"}[fault.kind]
        raise UnknownTargetError(kind, fault.target)


def inject_fault(world: WorldState, fault: FaultEvent) -> WorldState:
    _check_target(world, fault)
    new = world.copy()
    new.active_faults.append(fault)
    return new


# --------------------------------------------------------------------------
# control interface
# --------------------------------------------------------------------------

def _nack(world, cmd, reason):
    return CommandResult(False, adapter_latency(world.rng_seed, world.clock, cmd), reason)


def _ack(world, cmd, undo):
    return CommandResult(True, adapter_latency(world.rng_seed, world.clock, cmd), None, undo)


def _undo_cmd(cmd, verb, payload):
    return Command(-cmd.id - 1, cmd.adapter, verb, cmd.target, {**payload, "restore": True},
                   cmd.issued_tick, cmd.action_id)


def apply_command(world: WorldState, cmd: Command, eff: Optional[Effective] = None) -> CommandResult:
    """Execute one command in place. A nack leaves ``world`` untouched.

    The ack carries a compensating command that undoes this one exactly.
    Compensating commands (``payload["restore"]``) skip feasibility checks.
    """
    eff = eff or world.effective()
    topo = world.topology
    restore = bool(cmd.payload.get("restore", False))
    verb = cmd.verb

    if verb in ("install_flow_rule", "remove_flow_rule"):
        if not 0 <= cmd.target < len(world.flows):
            return _nack(world, cmd, "unknown_target")
        lid = cmd.payload["link"]
        if not 0 <= lid < topo.n_links:
            return _nack(world, cmd, "unknown_target")
        flow = world.flows[cmd.target]
        path = list(flow.path)
        if verb == "remove_flow_rule":
            if lid not in path:
                return _nack(world, cmd, "infeasible")
            pos = path.index(lid)
            path.pop(pos)
            world.flows[cmd.target] = replace(flow, path=tuple(path))
            return _ack(world, cmd, _undo_cmd(cmd, "install_flow_rule", {"link": lid, "position": pos}))
        if lid in path:
            return _nack(world, cmd, "infeasible")
        pos = cmd.payload.get("position")
        if not restore:
            if not eff.link_up[lid]:
                return _nack(world, cmd, "infeasible")
            try:
                end = path_nodes(topo, flow.src, path)[-1]
            except SimError:
                return _nack(world, cmd, "infeasible")
            if end not in topo.links[lid].endpoints or end == flow.dst:
                return _nack(world, cmd, "infeasible")
        if pos is None:
            pos = len(path)
        path.insert(pos, lid)
        world.flows[cmd.target] = replace(flow, path=tuple(path))
        return _ack(world, cmd, _undo_cmd(cmd, "remove_flow_rule", {"link": lid}))

    if verb in ("set_capacity", "set_queue_policy"):
        lid = cmd.target
        if not 0 <= lid < topo.n_links:
            return _nack(world, cmd, "unknown_target")
        if not restore and not eff.link_up[lid]:
            return _nack(world, cmd, "target_down")
        if verb == "set_capacity":
            delta = float(cmd.payload["delta"])
            new_cap = world.capacity[lid] + delta
            if not restore and (new_cap <= 0 or new_cap > topo.max_capacity[lid] + 1e-9):
                return _nack(world, cmd, "infeasible")
            old = float(world.capacity[lid])
            world.capacity[lid] = cmd.payload["value"] if restore else new_cap
            return _ack(world, cmd, _undo_cmd(cmd, "set_capacity", {"delta": -delta, "value": old}))
        limit = float(cmd.payload["limit"])
        if not restore and limit < 0:
            return _nack(world, cmd, "infeasible")
        old = float(world.queue_limit[lid])
        world.queue_limit[lid] = limit
        return _ack(world, cmd, _undo_cmd(cmd, "set_queue_policy", {"limit": old}))

    if verb == "write_setpoint":
        nid = cmd.target
        if not 0 <= nid < topo.n_nodes:
            return _nack(world, cmd, "unknown_target")
        if not restore and not eff.node_up[nid]:
            return _nack(world, cmd, "target_down")
        delta = float(cmd.payload["work_delta"])
        old = float(world.task_work[nid])
        if not restore and old + delta < -1e-9:
            return _nack(world, cmd, "infeasible")
        world.task_work[nid] = cmd.payload["value"] if restore else max(old + delta, 0.0)
        return _ack(world, cmd, _undo_cmd(cmd, "write_setpoint", {"work_delta": -delta, "value": old}))

    return _nack(world, cmd, "infeasible")  # pragma: no cover - Command validates verbs
