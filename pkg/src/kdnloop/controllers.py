"""Controllers sharing one interface: the KDN pipeline and three baselines.

* ``kdn`` - utility/cost optimisation over the knowledge graph.
* ``tet`` - threshold-triggered: every breach fires its bound action, no hysteresis.
* ``hrs`` - ordered static rule table evaluated on a fixed schedule.
* ``rlc`` - tabular one-step value learning over action kinds, epsilon-greedy.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .decision import (EMPTY, KINDS, ActionSet, DecisionConfig, DecisionEngine, link_pressure,
                       link_weights, make_offload, make_queue_mgmt, make_realloc, make_redirect,
                       reduction, worst_incident_link)
from .telemetry import DELTA, ETA, FIELDS, GAMMA, LAMBDA

RULE_METRICS = ("lambda", "delta", "gamma", "eta")


class Controller:
    name = "base"

    def decide(self, snapshot, graph, world) -> ActionSet:
        raise NotImplementedError

    def notify(self, report, next_snapshot) -> None:
        pass


def _conflict_free(actions, limit=None) -> ActionSet:
    kept = []
    for a in actions:
        if a is None or any(a.conflicts(k) for k in kept):
            continue
        kept.append(a.with_id(len(kept)))
        if limit is not None and len(kept) >= limit:
            break
    return ActionSet(tuple(kept), 0.0, (), len(kept))


class _Targets:
    """Per-tick cache of the quantities every baseline needs to pick targets."""

    def __init__(self, world):
        self.world = world
        self.eff = world.effective()
        self.arrivals = world.link_arrivals(self.eff)
        self.pressure = link_pressure(world, self.eff, self.arrivals)
        self._weights = None

    @property
    def weights(self):
        if self._weights is None:
            self._weights = link_weights(self.world, self.eff, self.arrivals)
        return self._weights

    def worst_link(self, node=None):
        if node is None:
            return int(np.argmax(self.pressure)) if len(self.pressure) else None
        return worst_incident_link(self.world, node, self.pressure)

    def redirect(self, link):
        if link is None:
            return None
        flows = sorted(self.world.flows_on_link(link), key=lambda f: (-self.eff.rates[f], f))
        for f in flows:
            a = make_redirect(self.world, f, link, self.weights)
            if a is not None:
                return a
        return None

    def realloc(self, link):
        return None if link is None else make_realloc(self.world, link, self.eff, self.arrivals)

    def queue(self, link, drain_ticks=2.0):
        if link is None:
            return None
        a = make_queue_mgmt(self.world, link, self.eff, drain_ticks)
        if a is None and self.eff.link_up[link]:
            # re-issue the policy even when already in force (no memory of past actions)
            a = make_queue_mgmt(replace(self.world, queue_limit=np.full_like(self.world.queue_limit, np.inf)),
                                link, self.eff, drain_ticks)
        return a

    def offload(self, node, gamma):
        return make_offload(self.world, node, self.eff, gamma)

    def instantiate(self, kind, node=None, gamma=None):
        if kind == "flow_redirect":
            return self.redirect(self.worst_link(node))
        if kind == "bandwidth_realloc":
            return self.realloc(self.worst_link(node))
        if kind == "queue_mgmt":
            if node is None:
                return self.queue(int(np.argmax(self.world.queue_len)))
            return self.queue(worst_incident_link(self.world, node, self.world.queue_len))
        if node is None:
            node = int(np.argmax(gamma))
        return self.offload(node, gamma)


def _gamma(snapshot, n_nodes):
    g = np.zeros(n_nodes)
    g[snapshot.node_ids] = snapshot.values[:, GAMMA]
    return g


class KDNController(Controller):
    name = "kdn"

    def __init__(self, cfg: DecisionConfig = DecisionConfig()):
        self.engine = DecisionEngine(cfg)

    def decide(self, snapshot, graph, world) -> ActionSet:
        return self.engine.decide(graph, world)


@dataclass(frozen=True)
class Thresholds:
    delay: float
    queue: float
    cpu: float


def tet_decide(snapshot, thresholds: Thresholds, world) -> ActionSet:
    """Fire the action bound to each breached metric, node-id order, first wins."""
    t = _Targets(world)
    gamma = _gamma(snapshot, world.topology.n_nodes)
    out = []
    for nid, v in sorted(zip(snapshot.node_ids.tolist(), snapshot.values), key=lambda x: x[0]):
        if v[LAMBDA] > thresholds.delay:
            out.append(t.redirect(t.worst_link(nid)))
        if v[ETA] > thresholds.queue:
            out.append(t.queue(worst_incident_link(world, nid, world.queue_len)))
        if v[GAMMA] > thresholds.cpu:
            out.append(t.offload(nid, gamma))
    return _conflict_free(out)


class TETController(Controller):
    name = "tet"

    def __init__(self, thresholds: Thresholds):
        self.thresholds = thresholds

    def decide(self, snapshot, graph, world) -> ActionSet:
        return tet_decide(snapshot, self.thresholds, world)


@dataclass(frozen=True)
class Rule:
    metric: str
    above: float
    action: str

    def __post_init__(self):
        if self.metric not in RULE_METRICS:
            raise ValueError(f"rule metric must be one of {RULE_METRICS}, got {self.metric!r}")
        if self.action not in KINDS:
            raise ValueError(f"rule action must be one of {KINDS}, got {self.action!r}")
        if not np.isfinite(self.above):
            raise ValueError("rule threshold must be finite")


def default_rules(th: Thresholds, redirect_factor: float = 2.0) -> list:
    return [
        Rule("eta", th.queue, "bandwidth_realloc"),
        Rule("gamma", th.cpu, "task_offload"),
        Rule("lambda", redirect_factor * th.delay, "flow_redirect"),
    ]


def hrs_decide(snapshot, rules, world, max_actions: int = 4) -> ActionSet:
    """First matching rule per node, ascending node id, at most ``max_actions``."""
    if not rules:
        return EMPTY
    t = _Targets(world)
    gamma = _gamma(snapshot, world.topology.n_nodes)
    out = []
    for nid, v in sorted(zip(snapshot.node_ids.tolist(), snapshot.values), key=lambda x: x[0]):
        for r in rules:
            if v[FIELDS.index(r.metric)] > r.above:
                out.append(t.instantiate(r.action, nid, gamma))
                break
    return _conflict_free(out, max_actions)


class HRSController(Controller):
    name = "hrs"

    def __init__(self, rules, period: int = 5, max_actions: int = 4):
        if period < 1:
            raise ValueError("period must be >= 1")
        self.rules = tuple(rules)
        self.period = period
        self.max_actions = max_actions

    def decide(self, snapshot, graph, world) -> ActionSet:
        if snapshot.tick % self.period:
            return EMPTY
        return hrs_decide(snapshot, self.rules, world, self.max_actions)


@dataclass(frozen=True)
class QTable:
    values: np.ndarray
    lr: float = 0.3
    discount: float = 0.8
    epsilon_explore: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.lr <= 1.0:
            raise ValueError("learning rate must be in (0, 1]")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must be in [0, 1)")
        if not 0.0 <= self.epsilon_explore <= 1.0:
            raise ValueError("epsilon_explore must be in [0, 1]")

    @classmethod
    def zeros(cls, n_states=27, **kw):
        return cls(np.zeros((n_states, len(KINDS))), **kw)

    def greedy(self, state: int) -> int:
        return int(np.argmax(self.values[state]))  # first max -> ascending kind order


def rlc_update(q: QTable, prev_state: int, action_kind: int, reward: float, new_state: int) -> QTable:
    v = q.values.copy()
    target = reward + q.discount * v[new_state].max()
    v[prev_state, action_kind] += q.lr * (target - v[prev_state, action_kind])
    return replace(q, values=v)


def state_bucket(snapshot) -> int:
    """27 states: (mean-lambda tercile, mean-gamma tercile, anomaly-count bucket)."""
    norm = snapshot.normalized
    lam = float(norm[:, LAMBDA].mean()) if norm is not None else 0.0
    gam = float(snapshot.values[:, GAMMA].mean())
    n_anom = int(snapshot.flags.sum())
    lt = min(int(lam * 3), 2)
    gt = min(int(gam * 3), 2)
    ab = 0 if n_anom == 0 else (1 if n_anom <= 3 else 2)
    return (lt * 3 + gt) * 3 + ab


def rlc_decide(snapshot, graph, world, qtable: QTable, rng) -> tuple:
    """(ActionSet, chosen kind index or None). Acts only while anomalies are flagged."""
    if not snapshot.flags.any():
        return EMPTY, None
    s = state_bucket(snapshot)
    if rng.random() < qtable.epsilon_explore:
        kind = int(rng.integers(len(KINDS)))
    else:
        kind = qtable.greedy(s)
    t = _Targets(world)
    action = t.instantiate(KINDS[kind], None, _gamma(snapshot, world.topology.n_nodes))
    return _conflict_free([action]), kind


def realized_reward(before, after) -> float:
    """Observed delay and throughput-dispersion improvement between two snapshots."""
    d = reduction(float(before.values[:, LAMBDA].mean()), float(after.values[:, LAMBDA].mean()))
    v = reduction(float(before.values[:, DELTA].std()), float(after.values[:, DELTA].std()))
    return 0.5 * d + 0.5 * v


class RLCController(Controller):
    name = "rlc"

    def __init__(self, horizon: int, seed: int = 0, lr=0.3, discount=0.8, eps_start=0.5, eps_end=0.05):
        self.q = QTable.zeros(lr=lr, discount=discount, epsilon_explore=eps_start)
        self.horizon = max(int(horizon), 1)
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.rng = np.random.default_rng((int(seed), 0xA11))
        self.pending: Optional[tuple] = None
        self.choices = []

    def epsilon(self, tick: int) -> float:
        frac = min(max(tick / max(self.horizon - 1, 1), 0.0), 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    def decide(self, snapshot, graph, world) -> ActionSet:
        self.q = replace(self.q, epsilon_explore=self.epsilon(snapshot.tick))
        aset, kind = rlc_decide(snapshot, graph, world, self.q, self.rng)
        if kind is None:
            self.pending = None
            return aset
        self.pending = (state_bucket(snapshot), kind, snapshot)
        self.choices.append((snapshot.tick, kind))
        return aset

    def notify(self, report, next_snapshot) -> None:
        if self.pending is None:
            return
        s, kind, before = self.pending
        self.q = rlc_update(self.q, s, kind, realized_reward(before, next_snapshot), state_bucket(next_snapshot))
        self.pending = None


def choice_variance(choices, start: int, stop: int) -> float:
    """Population variance of chosen kind indices with ``start <= tick < stop``; nan below 2 choices."""
    ks = [k for t, k in choices if start <= t < stop]
    if len(ks) < 2:
        return float("nan")
    return float(np.var(ks))
