"""Splittable-flow routing over shortest paths.

Two forwarding schemes share one machinery: ``ssp`` sends all traffic at a
node through the single lowest-id shortest-path edge, ``ecmp`` splits it
equally across every shortest-path edge. Both route each destination's
traffic over the shortest-path DAG of the whole graph, sweeping nodes in
decreasing distance-to-destination order so transit traffic is accumulated
before a node forwards.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .topology import Topology
from .util import dist_close

__all__ = [
    "DemandMatrix",
    "RoutingOutcome",
    "shortest_path_dag",
    "route",
    "route_ssp",
    "route_ecmp",
    "per_pair_flows",
    "mlu",
    "SCHEMES",
    "METRICS",
]

SCHEMES = ("ssp", "ecmp")
METRICS = ("weights", "hops")

PER_PAIR_MAX_NODES = 64


class DemandMatrix:
    """Square nonnegative traffic matrix indexed by node id.

    Row ``i``, column ``j`` is the demand from node ``i`` to node ``j``.
    The diagonal must be zero. The array keeps the index space of the graph
    it was drawn for, so demands for a variation subgraph stay addressable
    by original node ids (rows and columns of removed nodes are zero).
    """

    def __init__(self, values: np.ndarray):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValidationError(f"demand matrix must be square, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("demand matrix has non-finite entries")
        if np.any(arr < 0):
            raise ValidationError("demand matrix has negative entries")
        if np.any(np.diagonal(arr) != 0):
            raise ValidationError("demand matrix diagonal must be zero")
        arr.setflags(write=False)
        self.values = arr

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def total(self) -> float:
        return float(self.values.sum())

    def scaled(self, factor: float) -> "DemandMatrix":
        if not (math.isfinite(factor) and factor >= 0):
            raise ValidationError(f"bad demand scale factor {factor}")
        return DemandMatrix(self.values * factor)

    def __repr__(self) -> str:
        return f"DemandMatrix(n={self.n}, total={self.total():.6g})"


@dataclass(frozen=True)
class RoutingOutcome:
    """Result of routing one demand matrix: per-edge loads and their MLU."""

    scheme: str
    mlu: float
    loads: dict[int, float]

    def loads_array(self, t: Topology) -> np.ndarray:
        return np.array([self.loads[e.id] for e in t.edges], dtype=np.float64)

    def to_json_obj(self) -> dict:
        return {
            "scheme": self.scheme,
            "mlu": self.mlu,
            "loads": {str(eid): load for eid, load in sorted(self.loads.items())},
        }


def _edge_length(metric: str):
    if metric == "weights":
        return lambda e: e.weight
    if metric == "hops":
        return lambda e: 1.0
    raise ValidationError(f"unknown routing metric {metric!r}, expected one of {METRICS}")


def shortest_path_dag(
    t: Topology, dst: int, metric: str = "weights"
) -> tuple[dict[int, float], dict[int, tuple[int, ...]]]:
    """Distances to ``dst`` and, per node, its shortest-path out-edges.

    Runs Dijkstra on the reversed graph. ``next_hops[v]`` lists the ids of
    out-edges of ``v`` lying on some shortest path to ``dst``, ascending;
    nodes that cannot reach ``dst`` are absent from both maps. Distance ties
    are detected with a small relative tolerance so equal-cost paths built
    from floating-point weights are recognized.
    """
    if not t.has_node(dst):
        raise ValidationError(f"destination node {dst} not in topology")
    length = _edge_length(metric)
    dist: dict[int, float] = {}
    heap: list[tuple[float, int]] = [(0.0, dst)]
    best = {dst: 0.0}
    while heap:
        d, v = heapq.heappop(heap)
        if v in dist:
            continue
        dist[v] = d
        for e in t.in_edges(v):
            nd = d + length(e)
            u = e.src
            if u not in dist and (u not in best or nd < best[u]):
                best[u] = nd
                heapq.heappush(heap, (nd, u))
    next_hops: dict[int, tuple[int, ...]] = {}
    for v, dv in dist.items():
        if v == dst:
            next_hops[v] = ()
            continue
        hops = [
            e.id
            for e in t.out_edges(v)
            if e.dst in dist and dist_close(dv, length(e) + dist[e.dst])
        ]
        next_hops[v] = tuple(sorted(hops))
    return dist, next_hops


def _check_demands_fit(t: Topology, dm: DemandMatrix) -> None:
    if dm.n <= t.max_node_id():
        raise ValidationError(
            f"demand matrix indexes {dm.n} nodes but topology has node id "
            f"{t.max_node_id()}"
        )
    present = np.zeros(dm.n, dtype=bool)
    present[list(t.node_ids())] = True
    absent = ~present
    if np.any(dm.values[absent, :]) or np.any(dm.values[:, absent]):
        bad = int(np.flatnonzero(absent)[0])
        raise ValidationError(
            f"demand matrix has traffic for node {bad}, which is not in the topology"
        )


def _route_to_destination(
    t: Topology,
    dst: int,
    entering: dict[int, float],
    split: bool,
    metric: str,
    loads: dict[int, float],
) -> None:
    """Push ``entering[v]`` units from each node v to ``dst``, accumulating
    onto ``loads``. ``split`` chooses equal splitting over all shortest-path
    edges versus the single lowest-id one.
    """
    dist, next_hops = shortest_path_dag(t, dst, metric)
    for v, amount in entering.items():
        if amount > 0 and v not in dist:
            raise ValidationError(
                f"demand from node {v} to node {dst} but no directed path exists"
            )
    buffer = dict(entering)
    order = sorted(dist, key=lambda v: (-dist[v], v))
    for v in order:
        amount = buffer.get(v, 0.0)
        if v == dst or amount <= 0.0:
            continue
        hops = next_hops[v]
        if split:
            share = amount / len(hops)
            for eid in hops:
                e = t.edge(eid)
                loads[eid] += share
                buffer[e.dst] = buffer.get(e.dst, 0.0) + share
        else:
            eid = hops[0]
            e = t.edge(eid)
            loads[eid] += amount
            buffer[e.dst] = buffer.get(e.dst, 0.0) + amount


def _route_all(t: Topology, dm: DemandMatrix, split: bool, metric: str) -> dict[int, float]:
    _check_demands_fit(t, dm)
    loads = {e.id: 0.0 for e in t.edges}
    for dst in t.node_ids():
        column = dm.values[:, dst]
        entering = {
            v: float(column[v]) for v in t.node_ids() if column[v] > 0.0
        }
        if entering:
            _route_to_destination(t, dst, entering, split, metric, loads)
    return loads


def mlu(t: Topology, loads: dict[int, float]) -> float:
    """Maximum link utilization: the largest load/capacity ratio."""
    return max((loads[e.id] / e.capacity for e in t.edges), default=0.0)


def route_ssp(t: Topology, dm: DemandMatrix, metric: str = "weights") -> RoutingOutcome:
    loads = _route_all(t, dm, split=False, metric=metric)
    return RoutingOutcome("ssp", mlu(t, loads), loads)


def route_ecmp(t: Topology, dm: DemandMatrix, metric: str = "weights") -> RoutingOutcome:
    loads = _route_all(t, dm, split=True, metric=metric)
    return RoutingOutcome("ecmp", mlu(t, loads), loads)


def route(t: Topology, dm: DemandMatrix, scheme: str, metric: str = "weights") -> RoutingOutcome:
    if scheme == "ssp":
        return route_ssp(t, dm, metric)
    if scheme == "ecmp":
        return route_ecmp(t, dm, metric)
    raise ValidationError(f"unknown routing scheme {scheme!r}, expected one of {SCHEMES}")


def per_pair_flows(
    t: Topology, dm: DemandMatrix, scheme: str, metric: str = "weights"
) -> np.ndarray:
    """Per-commodity edge flows, shape (n, n, m) indexed [src, dst, edge pos].

    Edge positions follow ``t.edges`` order. Intended for conservation
    checks on small graphs; refuses matrices beyond
    ``PER_PAIR_MAX_NODES`` nodes to bound memory.
    """
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown routing scheme {scheme!r}, expected one of {SCHEMES}")
    if dm.n > PER_PAIR_MAX_NODES:
        raise ValidationError(
            f"per-pair flows limited to {PER_PAIR_MAX_NODES} nodes, got {dm.n}"
        )
    _check_demands_fit(t, dm)
    split = scheme == "ecmp"
    edge_pos = {e.id: i for i, e in enumerate(t.edges)}
    flows = np.zeros((dm.n, dm.n, t.n_edges), dtype=np.float64)
    for dst in t.node_ids():
        for src in t.node_ids():
            demand = float(dm.values[src, dst])
            if demand <= 0.0:
                continue
            loads = {e.id: 0.0 for e in t.edges}
            _route_to_destination(t, dst, {src: demand}, split, metric, loads)
            for eid, load in loads.items():
                if load:
                    flows[src, dst, edge_pos[eid]] = load
    return flows
