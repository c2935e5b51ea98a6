"""Candidate actions, utility/cost scoring and net-utility subset selection.

The selected subset maximises ``sum(U - beta * C)`` over conflict-free subsets
(no two actions touching the same link, node or flow). Small candidate sets
are solved exactly by enumeration; larger ones greedily.
"""

import math
from dataclasses import dataclass
from typing import Optional

import networkx as nx
import numpy as np

from . import kernels
from .enforcer import compile_action
from .knowledge import KnowledgeGraph
from .sim import FluidModel, WorldState

KINDS = ("flow_redirect", "bandwidth_realloc", "queue_mgmt", "task_offload")
KIND_COST = {"flow_redirect": 0.3, "bandwidth_realloc": 0.2, "queue_mgmt": 0.1, "task_offload": 0.4}
PER_COMMAND_COST = 0.05
INSTABILITY_WEIGHT = 0.1
INFEASIBLE = -math.inf
EXACT_HARD_LIMIT = 24


@dataclass(frozen=True)
class Action:
    id: int
    kind: str
    target: int
    parameters: dict
    touched: frozenset

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")
        if not self.touched:
            raise ValueError("touched resources must be non-empty")
        need = {
            "flow_redirect": {"old_path", "path", "avoid"},
            "bandwidth_realloc": {"delta"},
            "queue_mgmt": {"limit"},
            "task_offload": {"dest", "amount", "src_role", "dest_role"},
        }[self.kind]
        missing = need - set(self.parameters)
        if missing:
            raise ValueError(f"{self.kind} action missing parameters {sorted(missing)}")

    def __hash__(self):
        return hash((self.kind, self.target, tuple(sorted(self.parameters.items())), self.touched))

    @property
    def key(self):
        """Identity by effect: redirects that land on the same path are the same action."""
        params = self.parameters
        if self.kind == "flow_redirect":
            params = {k: v for k, v in params.items() if k != "avoid"}
        return (self.kind, self.target, tuple(sorted(params.items())))

    def conflicts(self, other: "Action") -> bool:
        return not self.touched.isdisjoint(other.touched)

    def with_id(self, new_id: int) -> "Action":
        return Action(new_id, self.kind, self.target, self.parameters, self.touched)


@dataclass(frozen=True)
class ScoredAction:
    action: Action
    utility: float
    cost: float

    def net(self, beta: float) -> float:
        return self.utility - beta * self.cost


@dataclass(frozen=True)
class ActionSet:
    actions: tuple = ()
    objective_value: float = 0.0
    scored: tuple = ()
    candidates: int = 0

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)


EMPTY = ActionSet()


@dataclass(frozen=True)
class DecisionConfig:
    beta: float = 1.0
    max_subset_size: int = 4
    exhaustive_limit: int = 12
    lookahead_ticks: int = 5
    max_actions: int = 32
    w_delay: float = 0.5
    w_tput: float = 0.5
    hot_util: float = 0.9
    top_congested: int = 3
    flows_per_link: int = 2
    queue_thresh: float = 48.0
    cpu_thresh: float = 0.9
    queue_ref: float = 60.0
    drain_ticks: float = 2.0
    offload_target: float = 0.7

    def validate(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.exhaustive_limit < 1:
            raise ValueError("exhaustive_limit must be >= 1")
        if self.exhaustive_limit > EXACT_HARD_LIMIT:
            raise ValueError(f"exhaustive_limit above {EXACT_HARD_LIMIT} is not supported")
        if self.max_subset_size < 1:
            raise ValueError("max_subset_size must be >= 1")
        if self.lookahead_ticks < 1:
            raise ValueError("lookahead_ticks must be >= 1")


# --------------------------------------------------------------------------
# action construction (shared with the baseline controllers)
# --------------------------------------------------------------------------

def link_weights(world: WorldState, eff=None, arrivals=None) -> np.ndarray:
    """Routing weight per link: current delay plus a utilisation term, inf if down."""
    eff = eff or world.effective()
    arrivals = world.link_arrivals(eff) if arrivals is None else arrivals
    live = eff.link_up & (eff.capacity > 0)
    cap = np.where(live, eff.capacity, 1.0)
    w = world.link_delays(eff) + world.dt * arrivals / cap
    return np.where(live, w, np.inf)


def alternate_path(world: WorldState, flow_id: int, avoid, weights: np.ndarray) -> Optional[tuple]:
    """Cheapest src->dst link path skipping ``avoid`` and down links; None if none differs."""
    flow = world.flows[flow_id]
    avoid = set(avoid)

    def w(u, v, d):
        lid = d["link"]
        if lid in avoid or not np.isfinite(weights[lid]):
            return None
        return float(weights[lid])

    try:
        nodes = nx.dijkstra_path(world.topology.graph, flow.src, flow.dst, weight=w)
    except nx.NetworkXNoPath:
        return None
    index = world.topology.link_index
    path = tuple(index[(min(a, b), max(a, b))] for a, b in zip(nodes, nodes[1:]))
    if not path or path == tuple(flow.path):
        return None
    return path


def make_redirect(world, flow_id, hot_link, weights) -> Optional[Action]:
    path = alternate_path(world, flow_id, {hot_link}, weights)
    if path is None:
        return None
    touched = {("flow", flow_id), ("link", hot_link)} | {("link", l) for l in path}
    params = {"old_path": tuple(world.flows[flow_id].path), "path": path, "avoid": hot_link}
    return Action(-1, "flow_redirect", flow_id, params, frozenset(touched))


def make_realloc(world, link, eff, arrivals, horizon=5) -> Optional[Action]:
    if not eff.link_up[link]:
        return None
    base = world.capacity[link]
    headroom = world.topology.max_capacity[link] - base
    if headroom <= 1e-6:
        return None
    mult = eff.capacity[link] / base if base > 0 else 1.0
    need = (arrivals[link] - eff.capacity[link] + world.queue_len[link] / horizon) / max(mult, 1e-9)
    # round down so the request never exceeds the headroom
    delta = math.floor(float(min(headroom, max(1.0, need))) * 1000.0) / 1000.0
    if delta <= 0:
        return None
    return Action(-1, "bandwidth_realloc", link, {"delta": delta}, frozenset({("link", link)}))


def make_queue_mgmt(world, link, eff, drain_ticks=2.0) -> Optional[Action]:
    if not eff.link_up[link]:
        return None
    limit = round(float(world.capacity[link] * drain_ticks), 3)
    if world.queue_limit[link] <= limit:
        return None
    return Action(-1, "queue_mgmt", link, {"limit": limit}, frozenset({("link", link)}))


def make_offload(world, node, eff, gamma, target_load=0.7) -> Optional[Action]:
    """Move task work from ``node`` to its least-loaded live neighbour."""
    topo = world.topology
    if not eff.node_up[node] or world.task_work[node] <= 0:
        return None
    best = None
    for lid in topo.incident[node]:
        nb = topo.links[lid].other(node)
        if not eff.node_up[nb]:
            continue
        key = (gamma[nb], nb)
        if best is None or key < best:
            best = key
    if best is None:
        return None
    dest = best[1]
    src_cap = topo.nodes[node].cpu_capacity
    dst_cap = topo.nodes[dest].cpu_capacity
    excess = (gamma[node] - target_load) * src_cap
    room = (target_load - gamma[dest]) * dst_cap
    amount = round(float(min(world.task_work[node], excess, room)), 3)
    if amount <= 0.01:
        return None
    params = {"dest": dest, "amount": amount, "src_role": topo.nodes[node].role,
              "dest_role": topo.nodes[dest].role}
    return Action(-1, "task_offload", node, params, frozenset({("node", node), ("node", dest)}))


def worst_incident_link(world, node, score) -> Optional[int]:
    inc = world.topology.incident[node]
    if not inc:
        return None
    return max(inc, key=lambda l: (score[l], -l))


def link_pressure(world, eff, arrivals) -> np.ndarray:
    """Congestion score per link: queue in ticks-of-service plus utilisation; down links with traffic rank first."""
    cap = np.where(eff.capacity > 0, eff.capacity, 1.0)
    score = world.queue_len / cap + arrivals / cap
    return np.where(eff.link_up, score, np.where(arrivals > 0, 1e6 + arrivals, 0.0))


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def enumerate_actions(graph: KnowledgeGraph, world: WorldState, cfg: DecisionConfig = DecisionConfig()) -> list:
    flags = graph.feature("epsilon")
    flagged = [int(v) for v, e in zip(graph.vertices, flags) if e > 0]
    if not flagged:
        return []
    topo = world.topology
    eff = world.effective()
    arrivals = world.link_arrivals(eff)
    pressure = link_pressure(world, eff, arrivals)
    weights = link_weights(world, eff, arrivals)
    cap = np.where(eff.capacity > 0, eff.capacity, 1.0)

    hot = set()
    for n in flagged:
        for l in topo.incident[n]:
            broken = not eff.link_up[l] and arrivals[l] > 0
            if broken or arrivals[l] > cfg.hot_util * cap[l] or world.queue_len[l] > 0:
                hot.add(l)
    busiest = [int(l) for l in np.argsort(-pressure, kind="stable")[:cfg.top_congested] if world.queue_len[l] > 0]
    hot.update(busiest)
    hot = sorted(hot, key=lambda l: (-pressure[l], l))

    out, seen = [], set()

    def add(a):
        if a is not None and a.key not in seen and len(out) < cfg.max_actions:
            seen.add(a.key)
            out.append(a.with_id(len(out)))

    rates = eff.rates
    for l in hot:
        on_link = sorted(world.flows_on_link(l), key=lambda f: (-rates[f], f))
        for f in on_link[:cfg.flows_per_link]:
            add(make_redirect(world, f, l, weights))
        if arrivals[l] > cfg.hot_util * cap[l] or world.queue_len[l] > 0:
            add(make_realloc(world, l, eff, arrivals, cfg.lookahead_ticks))

    eta = graph.feature("eta")
    gamma_feat = graph.feature("gamma")
    gamma = np.zeros(topo.n_nodes)
    gamma[graph.vertices] = gamma_feat
    for n in flagged:
        if eta[np.searchsorted(graph.vertices, n)] > cfg.queue_thresh:
            l = worst_incident_link(world, n, world.queue_len)
            if l is not None:
                add(make_queue_mgmt(world, l, eff, cfg.drain_ticks))
    for n in flagged:
        if gamma[n] > cfg.cpu_thresh:
            add(make_offload(world, n, eff, gamma, cfg.offload_target))
    return out


def apply_to_model(model: FluidModel, world: WorldState, action: Action) -> bool:
    """Apply an action to a cloned fluid model; False when it would be refused."""
    p = action.parameters
    if action.kind == "flow_redirect":
        f = action.target
        if not 0 <= f < len(model.paths) or tuple(model.paths[f]) != tuple(p["old_path"]):
            return False
        if not all(model.link_up[l] for l in p["path"]):
            return False
        model.paths[f] = tuple(p["path"])
        return True
    if action.kind == "bandwidth_realloc":
        l = action.target
        base = world.capacity[l]
        if not model.link_up[l] or base + p["delta"] > world.topology.max_capacity[l] + 1e-9 or base + p["delta"] <= 0:
            return False
        mult = model.capacity[l] / base
        model.capacity[l] = (base + p["delta"]) * mult
        return True
    if action.kind == "queue_mgmt":
        l = action.target
        if not model.link_up[l] or p["limit"] < 0:
            return False
        model.queue_limit[l] = p["limit"]
        return True
    src, dst, amount = action.target, p["dest"], p["amount"]
    if not (model.node_up[src] and model.node_up[dst]) or model.task_work[src] + 1e-9 < amount:
        return False
    model.task_work[src] = max(model.task_work[src] - amount, 0.0)
    model.task_work[dst] += amount
    return True


def reduction(before: float, after: float, tiny: float = 1e-12) -> float:
    """Relative reduction ``(before - after) / before`` clipped to [-1, 1]."""
    if before <= tiny:
        return 0.0 if after <= tiny else -1.0
    return float(min(1.0, max(-1.0, (before - after) / before)))


def delivery_variability(delivered: np.ndarray, rates: np.ndarray) -> float:
    """Std of per-flow delivery ratios over every (tick, flow) of a horizon."""
    safe = np.where(rates > 0, rates, 1.0)
    ratio = np.where(rates > 0, delivered / safe, 1.0)
    return float(ratio.std())


@dataclass
class Lookahead:
    """No-action counterfactual shared by all candidates of one decision."""

    model: FluidModel
    mean_delay: float
    variability: float

    @classmethod
    def from_world(cls, world: WorldState, ticks: int) -> "Lookahead":
        model = FluidModel.from_world(world)
        _, _, delay, deliv = model.clone().advance(ticks)
        return cls(model, float(delay.mean()), delivery_variability(deliv, model.rates))


def utility(action: Action, graph: KnowledgeGraph, world: WorldState, cfg: DecisionConfig = DecisionConfig(),
            baseline: Optional[Lookahead] = None) -> float:
    """Predicted benefit of ``action`` over a ``lookahead_ticks`` fluid rollout."""
    base = baseline or Lookahead.from_world(world, cfg.lookahead_ticks)
    model = base.model.clone()
    if not apply_to_model(model, world, action):
        return INFEASIBLE
    _, _, delay, deliv = model.advance(cfg.lookahead_ticks)
    d = reduction(base.mean_delay, float(delay.mean()))
    v = reduction(base.variability, delivery_variability(deliv, model.rates))
    return cfg.w_delay * d + cfg.w_tput * v


def touched_nodes(action: Action, graph: KnowledgeGraph) -> list:
    nodes = set()
    links = {rid for kind, rid in action.touched if kind == "link"}
    for kind, rid in action.touched:
        if kind == "node":
            nodes.add(rid)
    if links:
        for u, v, k, lid in zip(graph.edge_u, graph.edge_v, graph.edge_kind, graph.edge_link):
            if k == "physical_link" and lid in links:
                nodes.add(int(u))
                nodes.add(int(v))
    return sorted(nodes)


def cost(action: Action, graph: KnowledgeGraph, cfg: DecisionConfig = DecisionConfig()) -> float:
    n_cmds = len(compile_action(action))
    nodes = touched_nodes(action, graph)
    instab = 0.0
    if nodes:
        idx = np.searchsorted(graph.vertices, nodes)
        instab = float(np.clip(graph.feature("eta")[idx] / cfg.queue_ref, 0.0, 1.0).mean())
    return KIND_COST[action.kind] + PER_COMMAND_COST * n_cmds + INSTABILITY_WEIGHT * instab


def conflict_masks(actions) -> np.ndarray:
    m = len(actions)
    masks = np.zeros(m, dtype=np.int64)
    for i in range(m):
        for j in range(i + 1, m):
            if actions[i].conflicts(actions[j]):
                masks[i] |= 1 << j
                masks[j] |= 1 << i
    return masks


def _objective(chosen, beta):
    total = 0.0
    for s in chosen:
        total += s.utility - beta * s.cost
    return total


def select_actions(scored, cfg: DecisionConfig = DecisionConfig()) -> ActionSet:
    live = [s for s in scored if np.isfinite(s.utility)]
    if not live:
        return ActionSet(candidates=len(scored))
    beta = cfg.beta
    net = np.array([s.utility - beta * s.cost for s in live])
    if len(live) <= cfg.exhaustive_limit:
        mask, _ = kernels.best_subset(net, conflict_masks([s.action for s in live]), int(cfg.max_subset_size))
        chosen = [s for i, s in enumerate(live) if (mask >> i) & 1]
    else:
        picked = []
        for i in sorted(range(len(live)), key=lambda i: (-net[i], i)):
            if net[i] <= 0 or len(picked) >= cfg.max_subset_size:
                break
            if any(live[i].action.conflicts(live[j].action) for j in picked):
                continue
            picked.append(i)
        chosen = [live[i] for i in sorted(picked)]
    return ActionSet(tuple(s.action for s in chosen), _objective(chosen, beta), tuple(chosen), len(scored))


class DecisionEngine:
    def __init__(self, cfg: DecisionConfig = DecisionConfig()):
        cfg.validate()
        self.cfg = cfg

    def score(self, graph, world) -> list:
        actions = enumerate_actions(graph, world, self.cfg)
        if not actions:
            return []
        base = Lookahead.from_world(world, self.cfg.lookahead_ticks)
        return [ScoredAction(a, utility(a, graph, world, self.cfg, base), cost(a, graph, self.cfg))
                for a in actions]

    def decide(self, graph, world) -> ActionSet:
        return select_actions(self.score(graph, world), self.cfg)
