"""Sliding telemetry window and the moving-average knowledge graph."""

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sim import Topology, path_nodes
from .telemetry import FIELDS, TelemetrySnapshot

PHYSICAL_LINK, FLOW_DEPENDENCY = "physical_link", "flow_dependency"


class WindowError(ValueError):
    pass


class TelemetryWindow:
    """FIFO of the ``k + 1`` most recent snapshots, strictly increasing ticks."""

    def __init__(self, k: int = 4):
        if k < 0:
            raise WindowError(f"k must be >= 0, got {k}")
        self.k = k
        self.buffer = deque(maxlen=k + 1)

    @property
    def capacity(self):
        return self.k + 1

    @property
    def ticks(self):
        return [s.tick for s in self.buffer]

    def __len__(self):
        return len(self.buffer)

    def push(self, snapshot: TelemetrySnapshot):
        if self.buffer and snapshot.tick <= self.buffer[-1].tick:
            raise WindowError(f"tick {snapshot.tick} not after newest buffered tick {self.buffer[-1].tick}")
        self.buffer.append(snapshot)
        return self


def update_window(window: TelemetryWindow, snapshot: TelemetrySnapshot) -> TelemetryWindow:
    return window.push(snapshot)


@dataclass(frozen=True)
class KnowledgeGraph:
    """G = (V, E, X). Edge ``i`` joins ``edge_u[i]``-``edge_v[i]`` (ids, u < v)."""

    tick: int
    vertices: np.ndarray
    features: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_kind: tuple
    edge_up: np.ndarray
    edge_link: np.ndarray

    def __post_init__(self):
        for arr in (self.vertices, self.features, self.edge_u, self.edge_v, self.edge_up, self.edge_link):
            arr.flags.writeable = False

    @property
    def n_features(self):
        return self.features.shape[1]

    def feature(self, name: str) -> np.ndarray:
        return self.features[:, FIELDS.index(name)]

    def row(self, node_id: int) -> np.ndarray:
        idx = int(np.searchsorted(self.vertices, node_id))
        if idx >= len(self.vertices) or self.vertices[idx] != node_id:
            raise KeyError(node_id)
        return self.features[idx]

    def edges(self, kind: Optional[str] = None) -> list:
        return [(int(u), int(v)) for u, v, k in zip(self.edge_u, self.edge_v, self.edge_kind)
                if kind is None or k == kind]


def window_mean(snapshots) -> tuple:
    """(sorted node ids, mean feature matrix) over the given snapshots."""
    ids = snapshots[0].node_ids
    for s in snapshots[1:]:
        if not np.array_equal(s.node_ids, ids):
            raise WindowError("snapshots in a window must cover the same nodes in the same order")
    X = np.mean(np.stack([s.values for s in snapshots]), axis=0)
    order = np.argsort(ids, kind="stable")
    return ids[order], X[order]


def build_graph(window: TelemetryWindow, topology: Topology, flows,
                link_up: Optional[np.ndarray] = None) -> KnowledgeGraph:
    """Moving average of the buffered snapshots over the node set.

    Before the window fills, the mean runs over the snapshots available.
    """
    if not len(window):
        raise WindowError("cannot build a graph from an empty window")
    snaps = list(window.buffer)
    vertices, X = window_mean(snaps)

    up = np.array([l.up for l in topology.links], dtype=bool) if link_up is None else link_up
    us, vs, kinds, ups, lids = [], [], [], [], []
    for l in topology.links:
        a, b = l.endpoints
        us.append(min(a, b))
        vs.append(max(a, b))
        kinds.append(PHYSICAL_LINK)
        ups.append(bool(up[l.id]))
        lids.append(l.id)
    dep = set()
    for f in flows:
        nodes = path_nodes(topology, f.src, f.path)
        for a, b in zip(nodes, nodes[1:]):
            if a != b:
                dep.add((min(a, b), max(a, b)))
    for a, b in sorted(dep):
        lid = topology.link_index.get((a, b), -1)
        us.append(a)
        vs.append(b)
        kinds.append(FLOW_DEPENDENCY)
        ups.append(bool(up[lid]) if lid >= 0 else True)
        lids.append(lid)
    return KnowledgeGraph(
        tick=snaps[-1].tick,
        vertices=np.asarray(vertices, dtype=np.int64).copy(),
        features=np.ascontiguousarray(X),
        edge_u=np.asarray(us, dtype=np.int64),
        edge_v=np.asarray(vs, dtype=np.int64),
        edge_kind=tuple(kinds),
        edge_up=np.asarray(ups, dtype=bool),
        edge_link=np.asarray(lids, dtype=np.int64),
    )


class KnowledgeBuilder:
    def __init__(self, k: int = 4):
        self.window = TelemetryWindow(k)

    def update(self, snapshot, topology, flows, link_up=None) -> KnowledgeGraph:
        self.window.push(snapshot)
        return build_graph(self.window, topology, flows, link_up)


def write_graph_csv(graph: KnowledgeGraph, edges_fh, features_fh):
    edges_fh.write("u,v,kind,up,link\n")
    for u, v, k, up, lid in zip(graph.edge_u, graph.edge_v, graph.edge_kind, graph.edge_up, graph.edge_link):
        edges_fh.write(f"{u},{v},{k},{int(up)},{lid}\n")
    features_fh.write("node_id," + ",".join(FIELDS) + "\n")
    for nid, row in zip(graph.vertices, graph.features):
        features_fh.write(f"{nid}," + ",".join(f"{x:.9g}" for x in row) + "\n")
