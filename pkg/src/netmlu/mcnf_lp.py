"""Approximate minimum maximum-link-utilization of a multicommodity flow.

The minimum MLU for routing a demand matrix splittably equals 1/lambda*,
where lambda* is the maximum concurrent flow value. This module computes it
with the multiplicative-weights scheme of Garg-Konemann/Fleischer: edges
carry exponential length functions, each phase routes every commodity fully
along currently-shortest paths, and lengths grow with utilization so later
phases avoid congested links.

Rather than trusting the worst-case phase bound, each phase evaluates an
explicit primal/dual certificate. The flow accumulated over T phases, scaled
by 1/T, is a feasible routing whose MLU upper-bounds the optimum; shortest
path distances under the current lengths give a lower bound. The solver
stops as soon as the two are within (1+epsilon) of each other, which is
what the returned theta's guarantee rests on.

Everything runs batched: dataset synthesis solves hundreds of instances on
one graph, so all solver state carries a leading sample axis and the whole
batch advances in lockstep. Every operation is row-local and a converged
row's updates degenerate to exact no-ops, which makes each sample's result
bit-identical to running it alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConvergenceError, ValidationError
from .routing import DemandMatrix, route_ecmp
from .topology import Topology

__all__ = ["MinMluResult", "min_mlu", "min_mlu_batch", "rescale_demands"]

MIN_PHASE_CAP = 16
MAX_TREE_STEPS_PER_SOURCE = 32


@dataclass(frozen=True)
class MinMluResult:
    """Certified approximate minimum MLU.

    ``theta`` is achieved by an explicit feasible routing, so it never
    undercuts the true optimum, and the dual certificate bounds it by
    (1+epsilon) times the optimum. ``iterations`` counts completed phases.
    """

    theta: float
    epsilon: float
    iterations: int


class _CompactGraph:
    """Array view of a topology for batched shortest-path sweeps.

    Node ids map to dense positions; edges keep ``t.edges`` order. Shortest
    paths use rounds of vectorized edge relaxation (Bellman-Ford) over the
    whole sample batch at once: the solver runs thousands of phases on small
    graphs, and amortizing the per-call overhead across rows is what makes
    that affordable.
    """

    def __init__(self, t: Topology):
        ids = sorted(t.node_ids())
        self.pos = {v: i for i, v in enumerate(ids)}
        self.ids = ids
        self.n = len(ids)
        self.m = t.n_edges
        self.src = np.array([self.pos[e.src] for e in t.edges], dtype=np.int64)
        self.dst = np.array([self.pos[e.dst] for e in t.edges], dtype=np.int64)
        self.cap = np.array([e.capacity for e in t.edges], dtype=np.float64)
        self._by_dst = np.argsort(self.dst, kind="stable")
        dst_sorted = self.dst[self._by_dst]
        first = np.ones(len(dst_sorted), dtype=bool)
        first[1:] = dst_sorted[1:] != dst_sorted[:-1]
        self._group_starts = np.flatnonzero(first)
        self._group_dsts = dst_sorted[self._group_starts]
        self._src_by_dst = self.src[self._by_dst]

    def distances(self, starts: np.ndarray, length: np.ndarray) -> np.ndarray:
        """Row-wise shortest-path distances.

        ``starts[r]`` is row r's source and ``length[r]`` its edge lengths;
        returns a (rows, n) distance matrix. Rows at their fixpoint pass
        through relaxation rounds unchanged bit for bit.
        """
        rows = len(starts)
        dist = np.full((rows, self.n), np.inf)
        dist[np.arange(rows), starts] = 0.0
        length_sorted = length[:, self._by_dst]
        for _ in range(self.n):
            cand = dist[:, self._src_by_dst] + length_sorted
            mins = np.minimum.reduceat(cand, self._group_starts, axis=1)
            prev = dist[:, self._group_dsts]
            np.minimum(mins, prev, out=mins)
            if np.array_equal(mins, prev):
                break
            dist[:, self._group_dsts] = mins
        return dist

    def trees(self, source: int, length: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances plus a parent edge index per (row, node).

        A reachable node's distance is bit-exactly some in-edge candidate,
        so exact equality recovers the tight edges; among equally short
        parents the smallest edge index wins, keeping trees deterministic.
        """
        rows = length.shape[0]
        dist = self.distances(np.full(rows, source, dtype=np.int64), length)
        cand = dist[:, self.src] + length
        tight = np.isfinite(cand) & (cand == dist[:, self.dst])
        ids_sorted = np.where(tight[:, self._by_dst], self._by_dst[None, :], self.m)
        pick = np.minimum.reduceat(ids_sorted, self._group_starts, axis=1)
        parent = np.full((rows, self.n), -1, dtype=np.int64)
        parent[:, self._group_dsts] = np.where(pick < self.m, pick, -1)
        parent[:, source] = -1
        return dist, parent


def _route_source_phase(
    g: _CompactGraph,
    source: int,
    targets: np.ndarray,
    amounts: np.ndarray,
    length: np.ndarray,
    flow: np.ndarray,
    epsilon: float,
) -> None:
    """Route one source's full demand vector for the current phase.

    Repeatedly sends the largest uniform per-row fraction of the remaining
    demands that keeps every tree edge within capacity (so lengths grow by
    at most 1+epsilon per step); after a step budget the remainder is forced
    through so the phase always completes and the primal stays exact.
    """
    rows = length.shape[0]
    remaining = amounts.copy()
    row_idx = np.arange(rows)[:, None]
    steps = 0
    while True:
        dist, parent = g.trees(source, length)
        reach = np.isfinite(dist[:, targets]) | (remaining == 0.0)
        if not reach.all():
            r, c = np.argwhere(~reach)[0]
            raise ValidationError(
                f"demand from node {g.ids[source]} to node {g.ids[targets[c]]} "
                "but no directed path exists"
            )
        # Edge loads by walking each target's parent chain; per-row adds are
        # independent, so batching does not change any row's arithmetic.
        load = np.zeros((rows, g.m))
        cur = np.broadcast_to(targets, (rows, len(targets))).copy()
        amt = remaining
        while True:
            j = parent[row_idx, cur]
            live = (j >= 0) & (amt > 0.0)
            if not live.any():
                break
            r, c = np.nonzero(live)
            jj = j[r, c]
            np.add.at(load, (r, jj), amt[r, c])
            cur[r, c] = g.src[jj]
        ratio = np.divide(
            g.cap[None, :], load, out=np.full_like(load, np.inf), where=load > 0.0
        )
        sigma = np.minimum(1.0, ratio.min(axis=1))
        steps += 1
        if steps >= MAX_TREE_STEPS_PER_SOURCE:
            sigma[:] = 1.0
        sent = sigma[:, None] * load
        flow += sent
        length *= 1.0 + epsilon * sent / g.cap[None, :]
        if np.all(sigma >= 1.0):
            return
        remaining = remaining * (1.0 - sigma)[:, None]


def min_mlu_batch(
    t: Topology,
    dms: Sequence[DemandMatrix],
    epsilon: float = 0.05,
    metric: str = "weights",
) -> list[MinMluResult]:
    """(1+epsilon)-approximate minimum achievable MLU per demand matrix.

    All matrices must address the same topology. Raises
    :class:`~netmlu.errors.ValidationError` for a zero demand matrix and
    :class:`~netmlu.errors.ConvergenceError` if any sample's certificate gap
    is still open after the phase cap ceil(eps^-2 * m * ln m) (never below
    ``MIN_PHASE_CAP``, which keeps single-edge instances runnable).

    The routing ``metric`` only enters through the feasible equal-split
    routing used to pre-scale demands; the optimum itself is weight-free.
    Pre-scaling by a feasible routing's MLU puts each optimum in (0, 1],
    keeps the exponential lengths well-conditioned, and makes the result
    exactly scale-covariant.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must be in (0, 1), got {epsilon}")
    if not dms:
        return []
    for dm in dms:
        if dm.total() == 0.0:
            raise ValidationError("zero demand matrix: minimum MLU rescaling is undefined")

    g = _CompactGraph(t)
    bases = np.array([route_ecmp(t, dm, metric).mlu for dm in dms])
    node_ids = list(g.ids)
    values = np.stack([dm.values[np.ix_(node_ids, node_ids)] for dm in dms])
    values /= bases[:, None, None]

    n_rows = len(dms)
    by_source: dict[int, np.ndarray] = {}
    for s in range(g.n):
        col = values[:, s, :]
        if col.any():
            targets = np.flatnonzero(col.any(axis=0))
            by_source[s] = targets
    sources = sorted(by_source)
    dual_rows = np.concatenate(
        [np.full(len(by_source[s]), k, dtype=np.int64) for k, s in enumerate(sources)]
    )
    dual_cols = np.concatenate([by_source[s] for s in sources])
    pair_amounts = np.concatenate(
        [values[:, s, by_source[s]] for s in sources], axis=1
    )
    start_nodes = np.array(sources, dtype=np.int64)

    m = g.m
    phase_cap = max(MIN_PHASE_CAP, math.ceil(epsilon**-2 * m * math.log(m)))
    delta = (m / (1.0 - epsilon)) ** (-1.0 / epsilon)
    length = np.tile(delta / g.cap, (n_rows, 1))
    flow = np.zeros((n_rows, m))
    best_primal = np.full(n_rows, np.inf)
    best_lower = np.zeros(n_rows)
    origin = np.arange(n_rows)
    theta = np.empty(n_rows)
    iterations = np.zeros(n_rows, dtype=np.int64)
    amounts = {s: values[:, s, by_source[s]] for s in sources}
    k_sources = len(sources)

    for phase in range(1, phase_cap + 1):
        for s in sources:
            _route_source_phase(g, s, by_source[s], amounts[s], length, flow, epsilon)
        best_primal = np.minimum(best_primal, (flow / g.cap).max(axis=1) / phase)

        rows = length.shape[0]
        starts = np.tile(start_nodes, rows)
        dist = g.distances(starts, np.repeat(length, k_sources, axis=0))
        dist = dist.reshape(rows, k_sources, g.n)[:, dual_rows, dual_cols]
        alpha = np.sum(pair_amounts * np.where(pair_amounts > 0.0, dist, 0.0), axis=1)
        best_lower = np.maximum(best_lower, alpha / (length @ g.cap))

        done = best_primal <= (1.0 + epsilon) * best_lower
        if done.any():
            theta[origin[done]] = best_primal[done] * bases[origin[done]]
            iterations[origin[done]] = phase
            keep = ~done
            if not keep.any():
                return [
                    MinMluResult(float(theta[i]), epsilon, int(iterations[i]))
                    for i in range(n_rows)
                ]
            origin = origin[keep]
            length = length[keep]
            flow = flow[keep]
            best_primal = best_primal[keep]
            best_lower = best_lower[keep]
            pair_amounts = pair_amounts[keep]
            for s in sources:
                amounts[s] = amounts[s][keep]
        length /= length.max(axis=1, keepdims=True)

    worst = int(origin[0])
    raise ConvergenceError(
        f"min-MLU certificate gap still open after {phase_cap} phases "
        f"(sample {worst}: feasible {best_primal[0] * bases[worst]:.6g}, "
        f"lower bound {best_lower[0] * bases[worst]:.6g}, epsilon {epsilon})"
    )


def min_mlu(
    t: Topology, d: DemandMatrix, epsilon: float = 0.05, metric: str = "weights"
) -> MinMluResult:
    """(1+epsilon)-approximate minimum achievable MLU for demands ``d``."""
    return min_mlu_batch(t, [d], epsilon, metric)[0]


def rescale_demands(d: DemandMatrix, theta: float, target: float = 1.0) -> DemandMatrix:
    """Divide every demand by ``theta`` (times ``target``).

    With theta from :func:`min_mlu`, the result's optimal MLU is
    approximately ``target`` (default 1).
    """
    if not (math.isfinite(theta) and theta > 0):
        raise ValidationError(f"rescale factor theta must be positive, got {theta}")
    if not (math.isfinite(target) and target > 0):
        raise ValidationError(f"rescale target must be positive, got {target}")
    return d.scaled(target / theta)
