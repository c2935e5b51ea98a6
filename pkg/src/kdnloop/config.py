"""Scenario configuration: strict JSON schema, validation and world construction."""

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .controllers import (HRSController, KDNController, RLCController, Rule, TETController, Thresholds,
                          default_rules)
from .decision import KINDS, DecisionConfig
from .sim import (DEFAULT_ROLE_MIX, FAULT_KINDS, ROLES, FaultEvent, Flow, LinkClass, SimError, SimParams,
                  TopologySpec, build_topology, check_flow, generate_flows, hop_path, make_world, path_nodes)
from .telemetry import PreprocessConfig, default_thresholds

CONTROLLERS = ("kdn", "tet", "hrs", "rlc")


class ConfigError(ValueError):
    """Validation failure; ``errors`` lists ``(field path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in self.errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LinkClassCfg(_Strict):
    capacity: float = Field(gt=0)
    base_delay: float = Field(ge=0)


class TopologyCfg(_Strict):
    node_count: int = Field(50, ge=2)
    role_mix: dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_ROLE_MIX))
    radius: float = Field(0.18, gt=0)
    fieldbus: LinkClassCfg = LinkClassCfg(capacity=20.0, base_delay=0.5)
    ip: LinkClassCfg = LinkClassCfg(capacity=60.0, base_delay=2.0)
    capacity_jitter: float = Field(0.2, ge=0, lt=1)
    headroom: float = Field(1.5, ge=1)
    seed: Optional[int] = None

    @field_validator("role_mix")
    @classmethod
    def _mix(cls, v):
        unknown = set(v) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown roles {sorted(unknown)}; expected a subset of {list(ROLES)}")
        if any(x < 0 for x in v.values()):
            raise ValueError("role fractions must be non-negative")
        if abs(sum(v.values()) - 1.0) > 1e-9:
            raise ValueError(f"role fractions must sum to 1, got {sum(v.values())!r}")
        return v

    def spec(self) -> TopologySpec:
        return TopologySpec(self.node_count, dict(self.role_mix), self.radius,
                            LinkClass(self.fieldbus.capacity, self.fieldbus.base_delay),
                            LinkClass(self.ip.capacity, self.ip.base_delay), self.capacity_jitter, self.headroom)


class FlowCfg(_Strict):
    src: int = Field(ge=0)
    dst: int = Field(ge=0)
    rate: float = Field(ge=0)
    priority: int = 0
    path: Optional[list[int]] = None


class FlowsCfg(_Strict):
    count: int = Field(12, ge=1)
    rate_min: float = Field(4.0, ge=0)
    rate_max: float = Field(10.0, ge=0)
    it_to_ot_share: float = Field(0.25, ge=0, le=1)
    explicit: Optional[list[FlowCfg]] = None

    @model_validator(mode="after")
    def _range(self):
        if self.rate_max < self.rate_min:
            raise ValueError("rate_max must be >= rate_min")
        return self


class FaultCfg(_Strict):
    kind: Literal[FAULT_KINDS]
    target: Union[int, Literal["auto"]] = "auto"
    start_tick: int = Field(ge=0)
    duration_ticks: int = Field(ge=1)
    magnitude: float = Field(gt=0)
    every: Optional[int] = Field(None, ge=1)
    count: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _repeat(self):
        if self.count > 1 and self.every is None:
            raise ValueError("count > 1 needs 'every'")
        return self


class SimCfg(_Strict):
    buffer_packets: float = Field(400.0, gt=0)
    penalty_delay: float = Field(150.0, gt=0)
    fwd_work: float = Field(0.5, ge=0)
    proc_delay: float = Field(0.2, ge=0)
    adapter_error_rate: float = Field(0.0, ge=0, le=1)


class PreprocessCfg(_Strict):
    alpha: float = Field(1.0, gt=0, le=1)
    delay_thresh: Optional[float] = Field(None, gt=0)
    queue_thresh: Optional[float] = Field(None, gt=0)
    cpu_thresh: float = Field(0.9, gt=0)
    delay_factor: float = Field(3.0, gt=0)
    queue_factor: float = Field(0.8, gt=0)
    delay_ref_factor: float = Field(10.0, gt=0)
    delay_ref: Optional[float] = Field(None, gt=0)
    throughput_ref: Optional[float] = Field(None, gt=0)
    queue_ref: Optional[float] = Field(None, gt=0)


class DecisionCfg(_Strict):
    beta: float = Field(1.0, ge=0)
    max_subset_size: int = Field(4, ge=1)
    exhaustive_limit: int = Field(12, ge=1, le=24)
    lookahead_ticks: int = Field(5, ge=1)
    max_actions: int = Field(32, ge=1)
    w_delay: float = Field(0.5, ge=0)
    w_tput: float = Field(0.5, ge=0)
    hot_util: float = Field(0.9, gt=0)
    top_congested: int = Field(3, ge=0)
    flows_per_link: int = Field(2, ge=0)
    drain_ticks: float = Field(2.0, gt=0)
    offload_target: float = Field(0.7, gt=0, lt=1)


class TetCfg(_Strict):
    # explicit thresholds win; otherwise the anomaly thresholds times ``scale`` (delay and queue)
    delay_thresh: Optional[float] = Field(None, gt=0)
    queue_thresh: Optional[float] = Field(None, gt=0)
    cpu_thresh: Optional[float] = Field(None, gt=0)
    scale: float = Field(1.0, gt=0)


class RuleCfg(_Strict):
    metric: Literal["lambda", "delta", "gamma", "eta"]
    above: float
    action: Literal[KINDS]


class HrsCfg(_Strict):
    period: int = Field(5, ge=1)
    max_actions: int = Field(4, ge=1)
    # default table only: redirect fires above redirect_factor * delay threshold
    redirect_factor: float = Field(2.0, gt=0)
    rules: Optional[list[RuleCfg]] = None


class RlcCfg(_Strict):
    lr: float = Field(0.3, gt=0, le=1)
    discount: float = Field(0.8, ge=0, lt=1)
    eps_start: float = Field(0.5, ge=0, le=1)
    eps_end: float = Field(0.05, ge=0, le=1)


class ControllersCfg(_Strict):
    tet: TetCfg = TetCfg()
    hrs: HrsCfg = HrsCfg()
    rlc: RlcCfg = RlcCfg()


class MetricsCfg(_Strict):
    baseline_window: int = Field(100, ge=1)
    match_timeout: int = Field(50, ge=0)
    w_delay: float = Field(0.5, ge=0)
    w_tput: float = Field(0.5, ge=0)
    w_jitter: float = Field(1.0, ge=0)
    w_var: float = Field(1.0, ge=0)
    jitter_ref: Optional[float] = Field(None, gt=0)
    var_ref: Optional[float] = Field(None, gt=0)


class ScenarioConfig(_Strict):
    name: str = "default"
    seed: int = 1
    steps: int = Field(1000, ge=1)
    dt_ms: float = Field(10.0, gt=0)
    window_k: int = Field(4, ge=0)
    warmup_ticks: int = Field(100, ge=0)
    topology: TopologyCfg = TopologyCfg()
    flows: FlowsCfg = FlowsCfg()
    faults: list[FaultCfg] = Field(default_factory=list)
    sim: SimCfg = SimCfg()
    preprocess: PreprocessCfg = PreprocessCfg()
    decision: DecisionCfg = DecisionCfg()
    controller: Literal[CONTROLLERS] = "kdn"
    controllers: ControllersCfg = ControllersCfg()
    metrics: MetricsCfg = MetricsCfg()
    output_dir: str = "out"
    telemetry_dump: bool = False

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def digest(self, seed: Optional[int] = None) -> str:
        """Reproducibility hash over the canonical config JSON and the run seed."""
        data = self.model_dump(mode="json")
        data.pop("output_dir")
        data["seed"] = self.seed if seed is None else seed
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _loc(err) -> str:
    out = ""
    for part in err["loc"]:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def parse_config(data) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError([(_loc(err), err["msg"]) for err in e.errors()]) from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError([("<file>", f"cannot read {path}: {e.strerror}")]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([("<file>", f"{path}: invalid JSON at line {e.lineno}: {e.msg}")]) from None
    return parse_config(data)


# --------------------------------------------------------------------------
# materialisation
# --------------------------------------------------------------------------

class Scenario:
    """A config resolved against one seed: topology, flows, faults, thresholds."""

    def __init__(self, cfg: ScenarioConfig, seed: Optional[int] = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else int(seed)
        errors = []
        topo_seed = self.seed if cfg.topology.seed is None else cfg.topology.seed
        try:
            self.topology = build_topology(cfg.topology.spec(), topo_seed)
        except SimError as e:
            raise ConfigError([("topology", str(e))]) from None
        self.flows = self._flows(errors)
        if errors:
            raise ConfigError(errors)
        self.faults = self._faults(errors)
        if errors:
            raise ConfigError(errors)

        probe = make_world(self.topology, self.flows, SimParams(dt=cfg.dt_ms), self.seed)
        d = default_thresholds(probe, cfg.preprocess.delay_factor, cfg.preprocess.queue_factor,
                               cfg.preprocess.delay_ref_factor)
        p = cfg.preprocess
        delay_thresh = p.delay_thresh or d["delay_thresh"]
        queue_thresh = p.queue_thresh or d["queue_thresh"]
        self.params = SimParams(cfg.dt_ms, cfg.sim.penalty_delay, cfg.sim.buffer_packets, cfg.sim.fwd_work,
                                cfg.sim.proc_delay)
        total_rate = sum(f.offered_rate for f in self.flows)
        self.preprocess = PreprocessConfig(
            alpha=p.alpha, delay_thresh=delay_thresh, queue_thresh=queue_thresh, cpu_thresh=p.cpu_thresh,
            delay_ref=p.delay_ref or p.delay_ref_factor * delay_thresh,
            throughput_ref=p.throughput_ref or max(total_rate, 1.0),
            queue_ref=p.queue_ref or queue_thresh / 0.8)
        dc = cfg.decision
        self.decision = DecisionConfig(
            beta=dc.beta, max_subset_size=dc.max_subset_size, exhaustive_limit=dc.exhaustive_limit,
            lookahead_ticks=dc.lookahead_ticks, max_actions=dc.max_actions, w_delay=dc.w_delay,
            w_tput=dc.w_tput, hot_util=dc.hot_util, top_congested=dc.top_congested,
            flows_per_link=dc.flows_per_link, queue_thresh=queue_thresh, cpu_thresh=p.cpu_thresh,
            queue_ref=self.preprocess.queue_ref, drain_ticks=dc.drain_ticks, offload_target=dc.offload_target)
        m = cfg.metrics
        self.jitter_ref = m.jitter_ref or self.preprocess.delay_ref
        self.var_ref = m.var_ref or (0.25 * self.preprocess.throughput_ref) ** 2
        base = Thresholds(delay_thresh, queue_thresh, p.cpu_thresh)
        tc = cfg.controllers.tet
        self.thresholds = Thresholds(tc.delay_thresh or tc.scale * delay_thresh,
                                     tc.queue_thresh or tc.scale * queue_thresh, tc.cpu_thresh or p.cpu_thresh)
        hc = cfg.controllers.hrs
        self.rules = (default_rules(base, hc.redirect_factor) if hc.rules is None
                      else [Rule(r.metric, r.above, r.action) for r in hc.rules])

    def _flows(self, errors):
        fc = self.cfg.flows
        topo = self.topology
        if fc.explicit is None:
            return generate_flows(topo, fc.count, (fc.rate_min, fc.rate_max), self.seed, fc.it_to_ot_share)
        flows = []
        for i, f in enumerate(fc.explicit):
            loc = f"flows.explicit[{i}]"
            if f.src >= topo.n_nodes or f.dst >= topo.n_nodes:
                errors.append((loc, f"node id out of range 0..{topo.n_nodes - 1}"))
                continue
            if f.src == f.dst:
                errors.append((loc, "src and dst must differ"))
                continue
            if f.path is None:
                path = hop_path(topo, f.src, f.dst)
            else:
                bad = [l for l in f.path if not 0 <= l < topo.n_links]
                if bad:
                    errors.append((f"{loc}.path", f"unknown link ids {bad}"))
                    continue
                path = tuple(f.path)
            flow = Flow(i, f.src, f.dst, path, f.rate, f.priority)
            try:
                check_flow(topo, flow)
            except SimError as e:
                errors.append((f"{loc}.path", str(e)))
                continue
            flows.append(flow)
        return flows

    def _auto_target(self, kind, index):
        rng = np.random.default_rng((self.seed, 0xFA17, index))
        topo = self.topology
        if kind == "load_fluctuation":
            heavy = sorted(range(len(self.flows)), key=lambda i: (-self.flows[i].offered_rate, i))[:3]
            return int(rng.choice(heavy))
        count = np.zeros(topo.n_links, dtype=np.int64)
        visits = np.zeros(topo.n_nodes, dtype=np.int64)
        ends = set()
        for f in self.flows:
            count[list(f.path)] += 1
            for n in path_nodes(topo, f.src, f.path)[1:-1]:
                visits[n] += 1
            ends.update((f.src, f.dst))
        if kind == "link_degradation":
            top = np.argsort(-count, kind="stable")[:3]
            return int(rng.choice(top))
        # prefer busy transit nodes whose loss leaves the network connected, so rerouting is possible
        cut = set(nx.articulation_points(topo.graph))
        order = [int(n) for n in np.argsort(-visits, kind="stable") if n not in ends]
        transit = [n for n in order if visits[n] > 0 and n not in cut][:3]
        if not transit:
            transit = [n for n in order if visits[n] > 0][:3] or order[:1] or [0]
        return int(rng.choice(transit))

    def _faults(self, errors):
        limits = {"load_fluctuation": len(self.flows), "link_degradation": self.topology.n_links,
                  "node_failure": self.topology.n_nodes}
        out = []
        for i, f in enumerate(self.cfg.faults):
            if f.target == "auto":
                target = self._auto_target(f.kind, i)
            elif not 0 <= f.target < limits[f.kind]:
                errors.append((f"faults[{i}].target", f"{f.kind} target {f.target} out of range 0..{limits[f.kind] - 1}"))
                continue
            else:
                target = f.target
            for r in range(f.count):
                start = f.start_tick + r * (f.every or 0)
                out.append(FaultEvent(f.kind, target, start, f.duration_ticks, f.magnitude))
        return out

    def world(self):
        return make_world(self.topology, self.flows, self.params, self.seed, self.faults)

    def controller(self, name: Optional[str] = None):
        name = name or self.cfg.controller
        if name == "kdn":
            return KDNController(self.decision)
        if name == "tet":
            return TETController(self.thresholds)
        if name == "hrs":
            hc = self.cfg.controllers.hrs
            return HRSController(self.rules, hc.period, hc.max_actions)
        if name == "rlc":
            rc = self.cfg.controllers.rlc
            return RLCController(self.cfg.steps, self.seed, rc.lr, rc.discount, rc.eps_start, rc.eps_end)
        raise ConfigError([("controller", f"unknown controller {name!r}; expected one of {list(CONTROLLERS)}")])


def validate_config(cfg: ScenarioConfig) -> Scenario:
    """Resolve every referenced id for the config's seed; raises ConfigError."""
    return Scenario(cfg)
