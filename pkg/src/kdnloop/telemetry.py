"""Per-node telemetry sampling and edge-agent style preprocessing."""

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .sim import WorldState, path_nodes

FIELDS = ("lambda", "delta", "gamma", "eta", "epsilon")
LAMBDA, DELTA, GAMMA, ETA, EPSILON = range(5)
CSV_HEADER = ("tick", "node_id") + FIELDS


@dataclass(frozen=True)
class TelemetryRecord:
    node_id: int
    lam: float
    delta: float
    gamma: float
    eta: float
    epsilon: int
    tick: int


@dataclass(frozen=True)
class TelemetrySnapshot:
    """All node observations at one tick. ``values`` columns follow ``FIELDS``."""

    tick: int
    node_ids: np.ndarray
    values: np.ndarray
    normalized: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.values.shape != (len(self.node_ids), len(FIELDS)):
            raise ValueError(f"values must have shape ({len(self.node_ids)}, {len(FIELDS)})")

    def __len__(self):
        return len(self.node_ids)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, FIELDS.index(name)]

    @property
    def flags(self) -> np.ndarray:
        return self.values[:, EPSILON].astype(np.int64)

    @property
    def records(self) -> list:
        return [TelemetryRecord(int(n), float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), self.tick)
                for n, v in zip(self.node_ids, self.values)]


@dataclass(frozen=True)
class PreprocessConfig:
    alpha: float = 1.0
    delay_thresh: float = 3.0
    queue_thresh: float = 48.0
    cpu_thresh: float = 0.9
    delay_ref: float = 30.0
    throughput_ref: float = 100.0
    queue_ref: float = 60.0

    def validate(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        for name in ("delay_thresh", "queue_thresh", "cpu_thresh"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("delay_ref", "throughput_ref", "queue_ref"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([self.delay_thresh, self.queue_thresh, self.cpu_thresh])


def default_thresholds(world: WorldState, delay_factor=3.0, queue_factor=0.8, ref_factor=10.0) -> dict:
    """Thresholds derived from the idle network.

    ``delay_thresh`` is ``delay_factor`` times the mean idle per-node delay,
    ``queue_thresh`` is ``queue_factor`` times the largest link capacity and the
    delay normalisation reference is ``ref_factor * delay_thresh``.
    """
    topo = world.topology
    base = topo.base_delay
    idle = [base[list(inc)].mean() for inc in topo.incident if inc]
    delay_thresh = delay_factor * float(np.mean(idle))
    return {
        "delay_thresh": delay_thresh,
        "queue_thresh": queue_factor * float(max(l.capacity for l in topo.links)),
        "delay_ref": ref_factor * delay_thresh,
    }


def sample(world: WorldState) -> TelemetrySnapshot:
    """Raw observation vector for every node; ``epsilon`` is left at 0."""
    topo = world.topology
    eff = world.effective()
    delay = world.link_delays(eff)
    n = topo.n_nodes
    vals = np.zeros((n, len(FIELDS)))
    penalty = world.params.penalty_delay
    for i, inc in enumerate(topo.incident):
        up = [l for l in inc if eff.link_up[l]]
        if eff.node_up[i] and up:
            vals[i, LAMBDA] = delay[up].mean()
        else:
            vals[i, LAMBDA] = penalty
        vals[i, ETA] = world.queue_len[list(inc)].sum() if inc else 0.0
    if world.flow_delivered is not None:
        for f, deliv in zip(world.flows, world.flow_delivered):
            for node in set(path_nodes(topo, f.src, f.path)):
                vals[node, DELTA] += deliv
    vals[:, GAMMA] = np.where(eff.node_up, np.clip(world.cpu_load, 0.0, 1.0), 0.0)
    return TelemetrySnapshot(world.clock, np.arange(n), vals)


@dataclass
class SmoothingState:
    """Per-node exponential smoothing memory keyed by node id."""

    last: dict = field(default_factory=dict)


def mark(values: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    flag = ((values[:, LAMBDA] > cfg.delay_thresh)
            | (values[:, ETA] > cfg.queue_thresh)
            | (values[:, GAMMA] > cfg.cpu_thresh))
    return flag.astype(np.float64)


def normalize(values: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    ref = np.array([cfg.delay_ref, cfg.throughput_ref, 1.0, cfg.queue_ref])
    return np.clip(values[:, :4] / ref, 0.0, 1.0)


def preprocess(snapshot: TelemetrySnapshot, cfg: PreprocessConfig,
               state: Optional[SmoothingState] = None) -> TelemetrySnapshot:
    """Smooth, threshold-mark and normalise a snapshot.

    Smoothing is ``s' = alpha * x + (1 - alpha) * s``; a node seen for the
    first time starts from its raw value. ``state`` is updated in place.
    """
    cfg.validate()
    vals = snapshot.values.copy()
    if state is not None and cfg.alpha < 1.0:
        a = cfg.alpha
        for row, nid in enumerate(snapshot.node_ids):
            prev = state.last.get(int(nid))
            if prev is not None:
                vals[row, :4] = a * vals[row, :4] + (1.0 - a) * prev
    if state is not None:
        for row, nid in enumerate(snapshot.node_ids):
            state.last[int(nid)] = vals[row, :4].copy()
    vals[:, EPSILON] = mark(vals, cfg)
    return replace(snapshot, values=vals, normalized=normalize(vals, cfg))


class TelemetryCollector:
    """Owns the smoothing state and the feedback log for one run."""

    def __init__(self, cfg: PreprocessConfig):
        cfg.validate()
        self.cfg = cfg
        self.state = SmoothingState()
        self.reports = []

    def collect(self, world: WorldState) -> TelemetrySnapshot:
        return preprocess(sample(world), self.cfg, self.state)

    def ingest(self, report):
        self.reports.append(report)


class TelemetryCsvWriter:
    def __init__(self, fh):
        self._w = csv.writer(fh, lineterminator="\n")
        self._w.writerow(CSV_HEADER)

    def write(self, snap: TelemetrySnapshot):
        for nid, v in zip(snap.node_ids, snap.values):
            self._w.writerow([snap.tick, int(nid), f"{v[0]:.6f}", f"{v[1]:.6f}", f"{v[2]:.6f}",
                              f"{v[3]:.6f}", int(v[4])])
