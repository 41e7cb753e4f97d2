"""Shared graph and demand generators for the test suite."""

from __future__ import annotations

import numpy as np

from netmlu.routing import DemandMatrix
from netmlu.topology import Edge, Node, Topology

DEFAULT_CAPS = (10.0, 40.0)


def strongly_connected_digraph(
    n: int,
    n_extra: int,
    rng: np.random.Generator,
    caps=DEFAULT_CAPS,
    name: str = "digraph",
) -> Topology:
    """Random directed graph: a full cycle plus extra one-way edges.

    The cycle guarantees strong connectivity while the extras keep the edge
    set genuinely asymmetric.
    """
    arcs = [(i, (i + 1) % n) for i in range(n)]
    present = set(arcs)
    while len(arcs) < n + n_extra:
        a, b = (int(x) for x in rng.integers(0, n, 2))
        if a != b and (a, b) not in present:
            present.add((a, b))
            arcs.append((a, b))
    edges = [
        Edge(k, a, b, float(rng.uniform(1.0, 3.0)), float(rng.choice(caps)))
        for k, (a, b) in enumerate(arcs)
    ]
    return Topology(name, [Node(i) for i in range(n)], edges)


def symmetric_graph(
    n: int,
    n_pairs: int,
    rng: np.random.Generator,
    caps=DEFAULT_CAPS,
    name: str = "symgraph",
    symmetric_weights: bool = True,
) -> Topology:
    """Random connected graph with every link present in both directions.

    Matches the shape of real ISP topologies: a random spanning tree plus
    extra undirected pairs, each materialized as two directed edges sharing
    one capacity.
    """
    n_pairs = min(n_pairs, n * (n - 1) // 2)
    pairs = []
    seen = set()
    for i in range(1, n):
        j = int(rng.integers(0, i))
        pairs.append((j, i))
        seen.add((j, i))
    while len(pairs) < n_pairs:
        a, b = sorted(int(x) for x in rng.integers(0, n, 2))
        if a != b and (a, b) not in seen:
            seen.add((a, b))
            pairs.append((a, b))
    edges = []
    for a, b in sorted(pairs):
        cap = float(rng.choice(caps))
        w1 = float(rng.uniform(1.0, 3.0))
        w2 = w1 if symmetric_weights else float(rng.uniform(1.0, 3.0))
        edges.append(Edge(len(edges), a, b, w1, cap))
        edges.append(Edge(len(edges), b, a, w2, cap))
    return Topology(name, [Node(i) for i in range(n)], edges)


def random_dm(n: int, rng: np.random.Generator, density: float = 0.5) -> DemandMatrix:
    """Random nonnegative demand matrix with a zero diagonal."""
    values = rng.uniform(0.5, 5.0, size=(n, n))
    values *= rng.random((n, n)) < density
    np.fill_diagonal(values, 0.0)
    return DemandMatrix(values)


def single_demand(n: int, src: int, dst: int, amount: float) -> DemandMatrix:
    values = np.zeros((n, n))
    values[src, dst] = amount
    return DemandMatrix(values)


# -- hand-solvable instances for the LP solver --------------------------------


def single_edge(cap: float = 10.0) -> Topology:
    return Topology(
        "single",
        [Node(0), Node(1)],
        [Edge(0, 0, 1, 1.0, cap), Edge(1, 1, 0, 1.0, cap)],
    )


def line_graph(caps: list[float]) -> Topology:
    """Path 0-1-...-k with both directions per hop, capacity per hop."""
    edges = []
    for i, cap in enumerate(caps):
        edges.append(Edge(2 * i, i, i + 1, 1.0, cap))
        edges.append(Edge(2 * i + 1, i + 1, i, 1.0, cap))
    return Topology("line", [Node(i) for i in range(len(caps) + 1)], edges)


def parallel_paths(caps: list[float], weights: list[float] | None = None) -> Topology:
    """Node 0 to node 1 through k disjoint relay nodes, one per path."""
    k = len(caps)
    weights = weights or [1.0] * k
    nodes = [Node(0), Node(1)] + [Node(2 + i) for i in range(k)]
    edges = []
    for i, (cap, w) in enumerate(zip(caps, weights)):
        relay = 2 + i
        edges.append(Edge(len(edges), 0, relay, w, cap))
        edges.append(Edge(len(edges), relay, 0, w, cap))
        edges.append(Edge(len(edges), relay, 1, w, cap))
        edges.append(Edge(len(edges), 1, relay, w, cap))
    return Topology("parallel", nodes, edges)


def star(n_leaves: int = 4, cap: float = 10.0) -> Topology:
    """Hub node 0 with spokes to nodes 1..n_leaves, both directions."""
    nodes = [Node(i) for i in range(n_leaves + 1)]
    edges = []
    for leaf in range(1, n_leaves + 1):
        edges.append(Edge(len(edges), 0, leaf, 1.0, cap))
        edges.append(Edge(len(edges), leaf, 0, 1.0, cap))
    return Topology("star", nodes, edges)


def four_cycle(cap: float = 10.0) -> Topology:
    arcs = [(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 0), (0, 3)]
    edges = [Edge(k, a, b, 1.0, cap) for k, (a, b) in enumerate(arcs)]
    return Topology("four_cycle", [Node(i) for i in range(4)], edges)


def mcnf_hand_instances():
    """Instances whose optimal max utilization is derivable by hand.

    Each optimum is certified by a matching cut: the stated value is achieved
    by an explicit flow and no assignment can do better because some edge set
    must carry a fixed total.
    """
    out = []

    out.append(("single-edge", single_edge(10.0), single_demand(2, 0, 1, 4.0), 0.4))
    # series path: the tightest hop binds
    out.append(("series", line_graph([10.0, 5.0, 20.0]), single_demand(4, 0, 3, 10.0), 2.0))
    out.append(
        ("two-parallel-equal", parallel_paths([10.0, 10.0]), single_demand(4, 0, 1, 8.0), 0.4)
    )
    # optimal split is proportional to capacity, not equal
    out.append(
        ("two-parallel-skewed", parallel_paths([10.0, 40.0]), single_demand(4, 0, 1, 25.0), 0.5)
    )
    out.append(
        (
            "three-parallel",
            parallel_paths([10.0, 20.0, 30.0]),
            single_demand(5, 0, 1, 30.0),
            0.5,
        )
    )
    # unequal weights steer shortest-path routing but not the optimum
    out.append(
        (
            "two-parallel-weighted",
            parallel_paths([10.0, 40.0], weights=[1.0, 3.0]),
            single_demand(4, 0, 1, 10.0),
            0.2,
        )
    )
    tri_dm = np.full((3, 3), 4.0)
    np.fill_diagonal(tri_dm, 0.0)
    # all-pairs on a triangle: direct links carry exactly their own pair
    out.append(("triangle-all-pairs", triangle(10.0), DemandMatrix(tri_dm), 0.4))
    shared = np.zeros((3, 3))
    shared[0, 2] = 4.0
    shared[1, 2] = 4.0
    # both commodities are forced through the final hop
    out.append(("shared-bottleneck", line_graph([10.0, 10.0]), DemandMatrix(shared), 0.8))
    leaf_dm = np.zeros((5, 5))
    leaf_dm[1:, 1:] = 2.0
    np.fill_diagonal(leaf_dm, 0.0)
    # every leaf pushes 2 to each of 3 peers through its only uplink
    out.append(("star-leaf-pairs", star(4, 10.0), DemandMatrix(leaf_dm), 0.6))
    opp = np.zeros((2, 2))
    opp[0, 1] = 4.0
    opp[1, 0] = 8.0
    # directions are independent capacities
    out.append(("opposite-directions", single_edge(10.0), DemandMatrix(opp), 0.8))
    # 4-cycle corner to corner: two disjoint 2-hop routes
    out.append(("cycle-cross", four_cycle(10.0), single_demand(4, 0, 2, 10.0), 0.5))

    return out


def triangle(cap: float = 10.0) -> Topology:
    arcs = [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)]
    edges = [Edge(k, a, b, 1.0, cap) for k, (a, b) in enumerate(arcs)]
    return Topology("triangle", [Node(i) for i in range(3)], edges)
