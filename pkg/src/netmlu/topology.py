"""Directed capacitated graph model: parsing, structural metrics, and
connected-subgraph variation sampling.

Topologies are immutable after construction. Node and edge ids are assigned
at parse time and survive subgraph extraction unchanged, so anything keyed by
edge id (per-edge model parameters, link loads) stays meaningful when a study
works on variations of one base graph.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, SamplingError, ValidationError
from .util import canonical_json, dist_close, sha256_hex

__all__ = [
    "Node",
    "Edge",
    "Topology",
    "TopologyMetrics",
    "parse_topology",
    "parse_repetita",
    "parse_native_json",
    "diameter",
    "weighted_betweenness",
    "compute_metrics",
    "sample_variation",
    "is_trivial_topology",
    "within_study_size",
    "has_capacity_diversity",
]


@dataclass(frozen=True)
class Node:
    id: int
    label: str = ""


@dataclass(frozen=True)
class Edge:
    id: int
    src: int
    dst: int
    weight: float
    capacity: float


class Topology:
    """Directed graph with positive routing weights and link capacities.

    Validated on construction: endpoints exist, no self-loops, weights and
    capacities strictly positive and finite, and the graph is connected when
    edges are treated as bidirectional. ``expect_dense_ids`` additionally
    requires node ids 0..N-1 and edge ids 0..m-1 in order, which holds for
    freshly parsed graphs but not for variation subgraphs.
    """

    def __init__(
        self,
        name: str,
        nodes: Iterable[Node],
        edges: Iterable[Edge],
        *,
        expect_dense_ids: bool = False,
    ):
        self.name = str(name)
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.edges: tuple[Edge, ...] = tuple(edges)
        self._validate(expect_dense_ids)
        self._by_node = {n.id: n for n in self.nodes}
        self._by_edge = {e.id: e for e in self.edges}
        out: dict[int, list[Edge]] = {n.id: [] for n in self.nodes}
        inc: dict[int, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            out[e.src].append(e)
            inc[e.dst].append(e)
        self._out = {v: tuple(es) for v, es in out.items()}
        self._in = {v: tuple(es) for v, es in inc.items()}

    # -- validation -------------------------------------------------------

    def _validate(self, expect_dense_ids: bool) -> None:
        if not self.nodes:
            raise ValidationError("topology has no nodes")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate node ids")
        id_set = set(ids)
        eids = [e.id for e in self.edges]
        if len(set(eids)) != len(eids):
            raise ValidationError("duplicate edge ids")
        for e in self.edges:
            if e.src not in id_set or e.dst not in id_set:
                raise ValidationError(
                    f"edge {e.id} references missing node ({e.src}->{e.dst})"
                )
            if e.src == e.dst:
                raise ValidationError(f"edge {e.id} is a self-loop at node {e.src}")
            if not (math.isfinite(e.weight) and e.weight > 0):
                raise ValidationError(f"edge {e.id} has nonpositive weight {e.weight}")
            if not (math.isfinite(e.capacity) and e.capacity > 0):
                raise ValidationError(
                    f"edge {e.id} has nonpositive capacity {e.capacity}"
                )
        if expect_dense_ids:
            if ids != list(range(len(ids))):
                raise ValidationError("node ids are not dense 0..N-1")
            if eids != list(range(len(eids))):
                raise ValidationError("edge ids are not dense 0..m-1")
        if not _connected_bidirectional(ids, self.edges):
            raise ValidationError(
                f"graph '{self.name}' is not connected (treating edges as bidirectional)"
            )

    # -- basic accessors ---------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def node_ids(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes)

    def has_node(self, node_id: int) -> bool:
        return node_id in self._by_node

    def node(self, node_id: int) -> Node:
        return self._by_node[node_id]

    def edge(self, edge_id: int) -> Edge:
        return self._by_edge[edge_id]

    def out_edges(self, node_id: int) -> tuple[Edge, ...]:
        return self._out[node_id]

    def in_edges(self, node_id: int) -> tuple[Edge, ...]:
        return self._in[node_id]

    def max_node_id(self) -> int:
        return max(n.id for n in self.nodes)

    def capacities(self) -> np.ndarray:
        """Capacities in ``self.edges`` order."""
        return np.array([e.capacity for e in self.edges], dtype=np.float64)

    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.edges], dtype=np.float64)

    # -- derived graphs ----------------------------------------------------

    def subgraph(self, keep_node_ids: Iterable[int], name: str | None = None) -> "Topology":
        """Node-induced subgraph. Surviving nodes and edges keep their ids."""
        keep = set(keep_node_ids)
        missing = keep - set(self._by_node)
        if missing:
            raise ValidationError(f"unknown node ids in subgraph request: {sorted(missing)}")
        nodes = tuple(n for n in self.nodes if n.id in keep)
        edges = tuple(e for e in self.edges if e.src in keep and e.dst in keep)
        return Topology(name or f"{self.name}#sub", nodes, edges)

    # -- serialization -----------------------------------------------------

    def to_json_obj(self) -> dict:
        return {
            "name": self.name,
            "nodes": [{"id": n.id, "label": n.label} for n in self.nodes],
            "edges": [
                {
                    "id": e.id,
                    "src": e.src,
                    "dst": e.dst,
                    "weight": e.weight,
                    "capacity": e.capacity,
                }
                for e in self.edges
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Topology":
        try:
            nodes = [Node(int(n["id"]), str(n["label"])) for n in obj["nodes"]]
            edges = [
                Edge(
                    int(e["id"]),
                    int(e["src"]),
                    int(e["dst"]),
                    float(e["weight"]),
                    float(e["capacity"]),
                )
                for e in obj["edges"]
            ]
            name = obj["name"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad native-json topology: {exc}") from exc
        return cls(name, nodes, edges)

    def content_hash(self) -> str:
        return sha256_hex(canonical_json(self.to_json_obj()))

    def __repr__(self) -> str:
        return f"Topology({self.name!r}, N={self.n_nodes}, m={self.n_edges})"


def _reaches_all(ids: Sequence[int], adj: dict[int, set[int]]) -> bool:
    seen = {ids[0]}
    queue = deque([ids[0]])
    while queue:
        v = queue.popleft()
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                queue.append(u)
    return len(seen) == len(ids)


def _connected_bidirectional(ids: Sequence[int], edges: Iterable[Edge]) -> bool:
    adj: dict[int, set[int]] = {i: set() for i in ids}
    for e in edges:
        adj[e.src].add(e.dst)
        adj[e.dst].add(e.src)
    return _reaches_all(ids, adj)


def _strongly_connected(ids: Sequence[int], edges: Iterable[Edge]) -> bool:
    fwd: dict[int, set[int]] = {i: set() for i in ids}
    rev: dict[int, set[int]] = {i: set() for i in ids}
    for e in edges:
        fwd[e.src].add(e.dst)
        rev[e.dst].add(e.src)
    return _reaches_all(ids, fwd) and _reaches_all(ids, rev)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def parse_topology(text, format: str, name: str = "topology") -> Topology:
    """Parse a topology from text in the named format.

    ``text`` may be a string or a file-like object. Formats: ``repetita``
    (NODES/EDGES sections with IGP weights and capacities) and
    ``native-json`` (the toolkit's own round-trippable schema).
    """
    if hasattr(text, "read"):
        text = text.read()
    if format == "repetita":
        return parse_repetita(text, name=name)
    if format == "native-json":
        return parse_native_json(text)
    raise ValidationError(f"unknown topology format: {format!r}")


def parse_native_json(text: str) -> Topology:
    import json

    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    return Topology.from_json_obj(obj)


def parse_repetita(text: str, name: str = "topology") -> Topology:
    """Parse the NODES/EDGES text format used by ISP topology archives.

    Layout: a ``NODES <n>`` header followed by one line per node
    (``label x y``), then an ``EDGES <m>`` header followed by one line per
    edge (``label src dst weight capacity delay``). A column-header line
    beginning with ``label`` may follow either section header and is skipped.
    The delay column is parsed for well-formedness and discarded.
    """
    lines = text.splitlines()
    pos = 0

    def next_line() -> tuple[int, str]:
        nonlocal pos
        while pos < len(lines):
            pos += 1
            stripped = lines[pos - 1].strip()
            if stripped:
                return pos, stripped
        return 0, ""

    lineno, header = next_line()
    if not header.startswith("NODES"):
        raise ParseError("expected 'NODES <count>' header", lineno or 1)
    n = _parse_count(header, "NODES", lineno)

    nodes: list[Node] = []
    first = True
    while len(nodes) < n:
        lineno, line = next_line()
        if not line:
            raise ParseError(f"expected {n} node lines, found {len(nodes)}", len(lines))
        parts = line.split()
        if first and parts[0].lower() == "label":
            first = False
            continue
        first = False
        if len(parts) < 3:
            raise ParseError("node line needs 'label x y'", lineno)
        try:
            float(parts[1]), float(parts[2])  # coordinates, unused
        except ValueError:
            raise ParseError(f"bad node coordinates: {line!r}", lineno) from None
        nodes.append(Node(len(nodes), parts[0]))

    lineno, header = next_line()
    if not header.startswith("EDGES"):
        raise ParseError("expected 'EDGES <count>' header", lineno or len(lines))
    m = _parse_count(header, "EDGES", lineno)

    edges: list[Edge] = []
    first = True
    while len(edges) < m:
        lineno, line = next_line()
        if not line:
            raise ParseError(f"expected {m} edge lines, found {len(edges)}", len(lines))
        parts = line.split()
        if first and parts[0].lower() == "label":
            first = False
            continue
        first = False
        if len(parts) < 6:
            raise ParseError("edge line needs 'label src dst weight capacity delay'", lineno)
        try:
            src, dst = int(parts[1]), int(parts[2])
            weight, capacity = float(parts[3]), float(parts[4])
            float(parts[5])  # delay, unused
        except ValueError:
            raise ParseError(f"bad edge fields: {line!r}", lineno) from None
        if not 0 <= src < n or not 0 <= dst < n:
            raise ValidationError(
                f"line {lineno}: edge endpoint out of range ({src}->{dst}, {n} nodes)"
            )
        edges.append(Edge(len(edges), src, dst, weight, capacity))

    lineno, trailing = next_line()
    if trailing:
        raise ParseError(f"unexpected trailing content: {trailing!r}", lineno)
    return Topology(name, nodes, edges, expect_dense_ids=True)


def _parse_count(header: str, keyword: str, lineno: int) -> int:
    parts = header.split()
    if len(parts) != 2:
        raise ParseError(f"malformed '{keyword} <count>' header", lineno)
    try:
        count = int(parts[1])
    except ValueError:
        raise ParseError(f"bad {keyword} count {parts[1]!r}", lineno) from None
    if count < 0:
        raise ParseError(f"negative {keyword} count", lineno)
    return count


# ---------------------------------------------------------------------------
# Structural metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TopologyMetrics:
    n_nodes: int
    diameter: int
    edge_density: float
    capacity_variance: float
    degree_variance: float
    weighted_betweenness_variance: float

    def as_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "diameter": self.diameter,
            "edge_density": self.edge_density,
            "capacity_variance": self.capacity_variance,
            "degree_variance": self.degree_variance,
            "weighted_betweenness_variance": self.weighted_betweenness_variance,
        }


def diameter(t: Topology) -> int:
    """Maximum hop count of a shortest directed path, over reachable pairs."""
    best = 0
    for source in t.node_ids():
        depth = {source: 0}
        queue = deque([source])
        while queue:
            v = queue.popleft()
            for e in t.out_edges(v):
                if e.dst not in depth:
                    depth[e.dst] = depth[v] + 1
                    queue.append(e.dst)
        if depth:
            best = max(best, max(depth.values()))
    return best


def weighted_betweenness(t: Topology) -> dict[int, float]:
    """Node betweenness over weighted shortest directed paths.

    Accumulates, for every ordered source/target pair, the fraction of
    shortest paths passing through each intermediate node, then divides by
    the (N-1)(N-2) ordered pairs that exclude the node itself.
    """
    n = t.n_nodes
    bc = {v: 0.0 for v in t.node_ids()}
    if n < 3:
        return bc
    for s in t.node_ids():
        order, dist, sigma, preds = _sssp_counts(t, s)
        delta = {v: 0.0 for v in dist}
        for w in reversed(order):
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                bc[w] += delta[w]
    norm = (n - 1) * (n - 2)
    return {v: val / norm for v, val in bc.items()}


def _sssp_counts(t: Topology, source: int):
    """Dijkstra with shortest-path counting (routing weights as distances)."""
    dist: dict[int, float] = {}
    sigma: dict[int, float] = {source: 1.0}
    preds: dict[int, list[int]] = {source: []}
    seen = {source: 0.0}
    order: list[int] = []
    heap: list[tuple[float, int]] = [(0.0, source)]
    while heap:
        d, v = heapq.heappop(heap)
        if v in dist:
            continue
        dist[v] = d
        order.append(v)
        for e in t.out_edges(v):
            nd = d + e.weight
            u = e.dst
            if u in dist:
                if dist_close(dist[u], nd):
                    sigma[u] += sigma[v]
                    preds[u].append(v)
            elif u in seen and dist_close(seen[u], nd):
                sigma[u] += sigma[v]
                preds[u].append(v)
            elif u not in seen or nd < seen[u]:
                seen[u] = nd
                sigma[u] = sigma[v]
                preds[u] = [v]
                heapq.heappush(heap, (nd, u))
    return order, dist, sigma, preds


def compute_metrics(t: Topology) -> TopologyMetrics:
    """Six structural properties used to relate graphs to task difficulty.

    Variances are population variances. Capacities are normalized by their
    maximum before taking the variance; degrees count both edge directions
    and are normalized by N; betweenness is the weighted variant above.
    """
    caps = t.capacities()
    cap_var = float(np.var(caps / caps.max())) if len(caps) else 0.0
    degrees = np.array(
        [len(t.out_edges(v)) + len(t.in_edges(v)) for v in t.node_ids()],
        dtype=np.float64,
    )
    deg_var = float(np.var(degrees / t.n_nodes))
    bc = weighted_betweenness(t)
    bc_var = float(np.var(np.array(list(bc.values()), dtype=np.float64)))
    return TopologyMetrics(
        n_nodes=t.n_nodes,
        diameter=diameter(t),
        edge_density=t.n_edges / t.n_nodes,
        capacity_variance=cap_var,
        degree_variance=deg_var,
        weighted_betweenness_variance=bc_var,
    )


# ---------------------------------------------------------------------------
# Variations and dataset-curation predicates
# ---------------------------------------------------------------------------

VARIATION_MAX_ATTEMPTS = 1000


def sample_variation(t: Topology, rng: np.random.Generator) -> Topology:
    """Connected node-induced subgraph with k nodes removed, k ~ U[1, N/5].

    Surviving nodes and edges keep their original ids. Draws are rejected
    until the subgraph is connected (strongly, so gravity traffic between
    every surviving pair stays routable; on the symmetric link sets of real
    topologies this coincides with plain connectivity); after
    ``VARIATION_MAX_ATTEMPTS`` rejections a :class:`SamplingError` is raised
    rather than silently returning a biased sample.
    """
    n = t.n_nodes
    if n < 6:
        raise ValidationError(f"need at least 6 nodes to sample a variation, got {n}")
    k_max = n // 5
    ids = np.array(t.node_ids())
    for _ in range(VARIATION_MAX_ATTEMPTS):
        k = int(rng.integers(1, k_max + 1))
        removed = rng.choice(ids, size=k, replace=False)
        keep = sorted(set(ids.tolist()) - set(removed.tolist()))
        keep_set = set(keep)
        kept_edges = [e for e in t.edges if e.src in keep_set and e.dst in keep_set]
        if _strongly_connected(keep, kept_edges):
            return t.subgraph(keep, name=f"{t.name}#var")
    raise SamplingError(
        f"no connected variation of '{t.name}' found in {VARIATION_MAX_ATTEMPTS} attempts"
    )


TRIVIALITY_MATRICES = 100


def is_trivial_topology(
    t: Topology,
    scheme: str,
    rng: np.random.Generator,
    *,
    epsilon: float = 0.05,
    n_matrices: int = TRIVIALITY_MATRICES,
    metric: str = "weights",
) -> bool:
    """True when the routing target barely varies across traffic samples.

    Draws 100 gravity demand matrices, routes each under ``scheme``, and
    reports whether the minimum utilization equals the 90th percentile
    (nearest-rank) within 1e-9 relative tolerance. Such graphs make the
    prediction task degenerate and are flagged during dataset construction.
    """
    if n_matrices != TRIVIALITY_MATRICES:
        raise ValidationError(
            f"the triviality check is defined over exactly {TRIVIALITY_MATRICES} "
            f"demand matrices, got {n_matrices}"
        )
    from . import mcnf_lp, routing, traffic

    raw = [
        traffic.gravity_dm(t, rng, rescale=False) for _ in range(n_matrices)
    ]
    results = mcnf_lp.min_mlu_batch(t, raw, epsilon, metric)
    mlus = []
    for dm, res in zip(raw, results):
        scaled = mcnf_lp.rescale_demands(dm, res.theta)
        mlus.append(routing.route(t, scaled, scheme, metric=metric).mlu)
    ordered = sorted(mlus)
    p90 = ordered[math.ceil(0.9 * n_matrices) - 1]
    return math.isclose(ordered[0], p90, rel_tol=1e-9, abs_tol=1e-12)


def within_study_size(t: Topology, lo: int = 20, hi: int = 100) -> bool:
    """Curation predicate: node count inside the studied size band."""
    return lo <= t.n_nodes <= hi


def has_capacity_diversity(t: Topology) -> bool:
    """Curation predicate: at least two distinct link capacities."""
    return len({e.capacity for e in t.edges}) >= 2
