"""MLU predictors: the per-edge-weights attention layer and four baselines.

The per-edge-weights (PEW) layer gives every directed edge its own transform
and query/key kernels, keyed by the edge's id in the original graph, so the
same parameters apply cleanly to any variation subgraph. One explicit
self-edge per node (its own parameter triple, keyed past the edge block)
closes the aggregation neighborhood; attention normalizes over it, and by
default the weighted sum includes it too. The ``strict_paper`` flag keeps
the self term in the softmax but drops it from the sum, reproducing the
asymmetric closed/open form.

Baselines: GAT (one shared transform, additive attention with a capacity
edge term), GCN and GraphSAGE (which take the mean incident capacity as an
extra node feature), and an MLP over the unrolled representation plus
adjacency and capacities. Graph models stack as many layers as the original
graph's diameter, sum-pool node embeddings, and apply a linear head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ValidationError
from .topology import Topology, diameter

__all__ = [
    "ARCHITECTURES",
    "GRAPH_ARCHITECTURES",
    "REPRESENTATIONS",
    "LEARNING_RATES",
    "widths_for",
    "ModelConfig",
    "GraphStruct",
    "PewParams",
    "GatParams",
    "GcnParams",
    "SageParams",
    "pew_layer",
    "gat_layer",
    "gcn_layer",
    "sage_layer",
    "mlp_forward",
    "Predictor",
    "build_model",
    "default_layer_count",
]

ARCHITECTURES = ("pew", "gat", "gcn", "sage", "mlp")
GRAPH_ARCHITECTURES = ("pew", "gat", "gcn", "sage")
REPRESENTATIONS = ("raw", "sum")
LEARNING_RATES = (1e-2, 5e-3, 1e-3)

_WIDTHS = {"pew": (4, 16), "gat": (8, 32), "gcn": (8, 32), "sage": (8, 32)}
_MLP_WIDTHS = {"sum": (64, 256), "raw": (64, 128)}

LEAKY_SLOPE = 0.2


def widths_for(architecture: str, representation: str) -> tuple[int, int]:
    """The two tuned widths for an architecture (MLP's depend on the
    representation, since raw inputs are much wider)."""
    if architecture == "mlp":
        return _MLP_WIDTHS[representation]
    return _WIDTHS[architecture]


@dataclass(frozen=True)
class ModelConfig:
    """One grid point: architecture, demand representation, width, depth, lr.

    ``architecture`` may also be ``constant``, a single-bias control model
    used as a sanity reference; it bypasses the width grid.
    """

    architecture: str
    representation: str
    width: int
    layers: int
    lr: float
    strict_paper: bool = False

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES + ("constant",):
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        if self.representation not in REPRESENTATIONS:
            raise ValidationError(f"unknown representation {self.representation!r}")
        if self.layers < 1:
            raise ValidationError(f"layer count must be >= 1, got {self.layers}")
        if not self.lr > 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if self.architecture != "constant" and self.width not in widths_for(
            self.architecture, self.representation
        ):
            raise ValidationError(
                f"width {self.width} not in the tuned grid "
                f"{widths_for(self.architecture, self.representation)} "
                f"for {self.architecture}/{self.representation}"
            )

    def as_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "representation": self.representation,
            "width": self.width,
            "layers": self.layers,
            "lr": self.lr,
            "strict_paper": self.strict_paper,
        }


def default_layer_count(t: Topology) -> int:
    """Depth rule: one layer per hop of the original graph's diameter."""
    return max(1, diameter(t))


class GraphStruct:
    """Index arrays describing one (sub)graph in the original id space.

    Aggregation rows are grouped by aggregating node (ascending position):
    first the node's incoming edges sorted by edge id, then its self row.
    ``row_param`` maps each row to a parameter index: real edges use their
    original edge id, node v's self row uses m_original + v.
    """

    def __init__(self, original: Topology, graph: Topology):
        self.m_original = original.n_edges
        self.n_original = original.n_nodes
        self.active = np.array(sorted(graph.node_ids()), dtype=np.int64)
        self.n_active = len(self.active)
        pos = {v: i for i, v in enumerate(self.active)}
        for v in graph.node_ids():
            if v >= self.n_original:
                raise ValidationError(
                    f"graph node id {v} has no parameters (original graph has "
                    f"{self.n_original} nodes)"
                )
        seg, row_param, row_src, row_dst, x_cap, real = [], [], [], [], [], []
        for p, v in enumerate(self.active):
            for e in sorted(graph.in_edges(v), key=lambda e: e.id):
                if e.id >= self.m_original:
                    raise ValidationError(
                        f"edge id {e.id} has no parameters (original graph has "
                        f"{self.m_original} edges)"
                    )
                seg.append(p)
                row_param.append(e.id)
                row_src.append(pos[e.src])
                row_dst.append(p)
                x_cap.append(e.capacity)
                real.append(1.0)
            seg.append(p)
            row_param.append(self.m_original + v)
            row_src.append(p)
            row_dst.append(p)
            x_cap.append(0.0)
            real.append(0.0)
        self.seg = np.array(seg, dtype=np.int64)
        self.row_param = np.array(row_param, dtype=np.int64)
        self.row_src = np.array(row_src, dtype=np.int64)
        self.row_dst = np.array(row_dst, dtype=np.int64)
        self.x_cap = np.array(x_cap, dtype=np.float64)
        self.real_mask = np.array(real, dtype=np.float64).reshape(-1, 1)
        self.n_rows = len(seg)

        # dense helpers for the convolutional baselines
        sym = np.zeros((self.n_active, self.n_active))
        mean_in = np.zeros((self.n_active, self.n_active))
        cap_sum = np.zeros(self.n_active)
        cap_cnt = np.zeros(self.n_active)
        for e in graph.edges:
            s, d = pos[e.src], pos[e.dst]
            sym[s, d] = 1.0
            sym[d, s] = 1.0
            mean_in[d, s] += 1.0
            cap_sum[s] += e.capacity
            cap_cnt[s] += 1.0
            cap_sum[d] += e.capacity
            cap_cnt[d] += 1.0
        sym += np.eye(self.n_active)
        inv_sqrt = 1.0 / np.sqrt(sym.sum(axis=1))
        self.gcn_adj = sym * inv_sqrt[:, None] * inv_sqrt[None, :]
        row_tot = mean_in.sum(axis=1, keepdims=True)
        np.divide(mean_in, row_tot, out=mean_in, where=row_tot > 0)
        self.sage_mean_in = mean_in
        with np.errstate(invalid="ignore"):
            self.cap_node_mean = np.where(cap_cnt > 0, cap_sum / np.maximum(cap_cnt, 1), 0.0)

        # constant MLP inputs in the original layout
        adj = np.zeros((self.n_original, self.n_original))
        cap_vec = np.zeros(self.m_original)
        for e in graph.edges:
            adj[e.src, e.dst] = 1.0
            cap_vec[e.id] = e.capacity
        self.adj_flat = adj.reshape(-1)
        self.cap_vec = cap_vec


# ---------------------------------------------------------------------------
# Layers. Node features are always batched: h has shape (B, n_active, d).
# ---------------------------------------------------------------------------


@dataclass
class PewParams:
    """Stacked per-edge parameters; row index = original edge id, rows past
    the edge block hold the per-node self-edge triples."""

    W: Tensor  # (P, d_in, d_out)
    Q: Tensor  # (P, d_out, 1)
    K: Tensor  # (P, d_out, 1)
    W1: Tensor  # (1, 1)


@dataclass
class GatParams:
    W: Tensor  # (d_in, d_out)
    a_dst: Tensor  # (d_out, 1)
    a_src: Tensor  # (d_out, 1)
    a_edge: Tensor  # (1, 1)


@dataclass
class GcnParams:
    W: Tensor
    b: Tensor


@dataclass
class SageParams:
    W_self: Tensor
    W_neigh: Tensor
    b: Tensor


def _zeta_weighted_sum(tape, gs: GraphStruct, messages, scores, strict_paper):
    batch = scores.shape[0]
    flat = ad.reshape(tape, scores, (batch, gs.n_rows))
    zeta = ad.segment_softmax(tape, flat, gs.seg, gs.n_active)
    weighted = ad.mul(tape, messages, ad.reshape(tape, zeta, (batch, gs.n_rows, 1)))
    if strict_paper:
        weighted = ad.mul(tape, weighted, ad.constant(gs.real_mask))
    out = ad.segment_sum(tape, weighted, gs.seg, gs.n_active)
    return ad.relu(tape, out), zeta


def pew_layer(
    tape: Tape,
    h: Tensor,
    gs: GraphStruct,
    x: Tensor,
    params: PewParams,
    strict_paper: bool = False,
    attention_out: list | None = None,
) -> Tensor:
    """One per-edge-weights attention layer.

    ``x`` holds the scalar edge feature per aggregation row, shape
    (n_rows, 1); self rows carry 0. Each row transforms its source node with
    its own matrix, scores itself against the aggregating node's transformed
    features, and contributes its softmax share of the message sum.
    ``attention_out``, if given, receives the softmax coefficient Tensor.
    """
    if h.values.ndim != 3:
        raise ValidationError(f"pew_layer expects batched features, got shape {h.shape}")
    W_rows = ad.gather_rows(tape, params.W, gs.row_param)
    Q_rows = ad.gather_rows(tape, params.Q, gs.row_param)
    K_rows = ad.gather_rows(tape, params.K, gs.row_param)
    h_src = ad.gather_rows(tape, h, gs.row_src, axis=1)
    h_dst = ad.gather_rows(tape, h, gs.row_dst, axis=1)
    g_src = ad.rowwise_matmul(tape, h_src, W_rows)
    g_dst = ad.rowwise_matmul(tape, h_dst, W_rows)
    q = ad.rowwise_matmul(tape, g_dst, Q_rows)
    k = ad.rowwise_matmul(tape, g_src, K_rows)
    edge_term = ad.matmul(tape, x, params.W1)
    scores = ad.leaky_relu(
        tape, ad.add(tape, ad.add(tape, q, k), edge_term), LEAKY_SLOPE
    )
    out, zeta = _zeta_weighted_sum(tape, gs, g_src, scores, strict_paper)
    if attention_out is not None:
        attention_out.append(zeta)
    return out


def gat_layer(
    tape: Tape,
    h: Tensor,
    gs: GraphStruct,
    x: Tensor,
    params: GatParams,
    attention_out: list | None = None,
) -> Tensor:
    """Shared-transform additive attention over the same row layout as PEW
    (incoming edges plus a self row per node; self rows carry x = 0)."""
    if h.values.ndim != 3:
        raise ValidationError(f"gat_layer expects batched features, got shape {h.shape}")
    Wh = ad.matmul(tape, h, params.W)
    s_dst = ad.matmul(tape, Wh, params.a_dst)
    s_src = ad.matmul(tape, Wh, params.a_src)
    msg = ad.gather_rows(tape, Wh, gs.row_src, axis=1)
    sd = ad.gather_rows(tape, s_dst, gs.row_dst, axis=1)
    ss = ad.gather_rows(tape, s_src, gs.row_src, axis=1)
    edge_term = ad.matmul(tape, x, params.a_edge)
    scores = ad.leaky_relu(
        tape, ad.add(tape, ad.add(tape, sd, ss), edge_term), LEAKY_SLOPE
    )
    out, zeta = _zeta_weighted_sum(tape, gs, msg, scores, strict_paper=False)
    if attention_out is not None:
        attention_out.append(zeta)
    return out


def gcn_layer(tape: Tape, h: Tensor, gs: GraphStruct, params: GcnParams) -> Tensor:
    mixed = ad.matmul(tape, ad.constant(gs.gcn_adj), h)
    return ad.relu(tape, ad.add(tape, ad.matmul(tape, mixed, params.W), params.b))


def sage_layer(tape: Tape, h: Tensor, gs: GraphStruct, params: SageParams) -> Tensor:
    neigh = ad.matmul(tape, ad.constant(gs.sage_mean_in), h)
    out = ad.add(
        tape,
        ad.add(
            tape,
            ad.matmul(tape, h, params.W_self),
            ad.matmul(tape, neigh, params.W_neigh),
        ),
        params.b,
    )
    return ad.relu(tape, out)


def mlp_forward(tape: Tape, x: Tensor, weights: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Fully connected stack: ReLU after every layer but the scalar head."""
    out = x
    for i, (W, b) in enumerate(weights):
        out = ad.add(tape, ad.matmul(tape, out, W), b)
        if i < len(weights) - 1:
            out = ad.relu(tape, out)
    return out


# ---------------------------------------------------------------------------
# Assembled predictor
# ---------------------------------------------------------------------------


class Predictor:
    """A configured model bound to one original topology.

    Parameters live in ``self.params`` (flat name -> Tensor, the unit the
    optimizer and checkpoints work with). Forward passes accept any graph
    whose node and edge ids come from the original topology, so variation
    subgraphs reuse the same parameters.
    """

    def __init__(self, config: ModelConfig, topology: Topology, rng: np.random.Generator):
        config.validate()
        if topology.node_ids() != tuple(range(topology.n_nodes)):
            raise ValidationError("predictor topology must have dense node ids")
        self.config = config
        self.topology = topology
        self.params: dict[str, Tensor] = {}
        self._structs: dict[int, tuple[Topology, GraphStruct]] = {}
        self._build(rng)

    # -- construction ------------------------------------------------------

    def _rep_dim(self) -> int:
        return 2 * self.topology.n_nodes if self.config.representation == "raw" else 2

    def _node_dim(self) -> int:
        extra = 1 if self.config.architecture in ("gcn", "sage") else 0
        return self._rep_dim() + extra

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        arch = cfg.architecture
        if arch == "constant":
            self.params["bias"] = ad.parameter(np.zeros((1, 1)))
            return
        if arch == "mlp":
            n = self.topology.n_nodes
            in_dim = self._rep_dim() * n + n * n + self.topology.n_edges
            dims = [in_dim, cfg.width] + [max(1, cfg.width // 2)] * (cfg.layers - 1) + [1]
            for i in range(len(dims) - 1):
                self.params[f"mlp{i}.W"] = ad.parameter(ad.glorot(rng, (dims[i], dims[i + 1])))
                self.params[f"mlp{i}.b"] = ad.parameter(np.zeros(dims[i + 1]))
            return
        d_in = self._node_dim()
        p_rows = self.topology.n_edges + self.topology.n_nodes
        for i in range(cfg.layers):
            d = d_in if i == 0 else cfg.width
            w = cfg.width
            pre = f"layer{i}."
            if arch == "pew":
                self.params[pre + "W"] = ad.parameter(ad.glorot(rng, (p_rows, d, w)))
                self.params[pre + "Q"] = ad.parameter(ad.glorot(rng, (p_rows, w, 1)))
                self.params[pre + "K"] = ad.parameter(ad.glorot(rng, (p_rows, w, 1)))
                self.params[pre + "W1"] = ad.parameter(ad.glorot(rng, (1, 1)))
            elif arch == "gat":
                self.params[pre + "W"] = ad.parameter(ad.glorot(rng, (d, w)))
                self.params[pre + "a_dst"] = ad.parameter(ad.glorot(rng, (w, 1)))
                self.params[pre + "a_src"] = ad.parameter(ad.glorot(rng, (w, 1)))
                self.params[pre + "a_edge"] = ad.parameter(ad.glorot(rng, (1, 1)))
            elif arch == "gcn":
                self.params[pre + "W"] = ad.parameter(ad.glorot(rng, (d, w)))
                self.params[pre + "b"] = ad.parameter(np.zeros(w))
            elif arch == "sage":
                self.params[pre + "W_self"] = ad.parameter(ad.glorot(rng, (d, w)))
                self.params[pre + "W_neigh"] = ad.parameter(ad.glorot(rng, (d, w)))
                self.params[pre + "b"] = ad.parameter(np.zeros(w))
        self.params["head.W"] = ad.parameter(ad.glorot(rng, (cfg.width, 1)))
        self.params["head.b"] = ad.parameter(np.zeros(1))

    # -- structure cache ----------------------------------------------------

    def struct_for(self, graph: Topology) -> GraphStruct:
        key = id(graph)
        hit = self._structs.get(key)
        if hit is None or hit[0] is not graph:
            self._structs[key] = (graph, GraphStruct(self.topology, graph))
        return self._structs[key][1]

    # -- forward -------------------------------------------------------------

    def _node_features(self, demands: np.ndarray, gs: GraphStruct, max_capacity: float) -> np.ndarray:
        if self.config.representation == "raw":
            feats = np.concatenate([demands.transpose(0, 2, 1), demands], axis=2)
        else:
            feats = np.stack([demands.sum(axis=2), demands.sum(axis=1)], axis=2)
        feats = feats[:, gs.active, :]
        if self.config.architecture in ("gcn", "sage"):
            cap = gs.cap_node_mean / max_capacity
            col = np.broadcast_to(cap[None, :, None], (feats.shape[0], gs.n_active, 1))
            feats = np.concatenate([feats, col], axis=2)
        return feats

    def forward(
        self, tape: Tape, demands: np.ndarray, graph: Topology, max_capacity: float
    ) -> Tensor:
        """Predict MLU for a batch of standardized demand matrices routed on
        ``graph``; returns shape (batch,)."""
        if demands.ndim != 3 or demands.shape[1:] != (self.topology.n_nodes,) * 2:
            raise ValidationError(
                f"expected demands of shape (B, {self.topology.n_nodes}, "
                f"{self.topology.n_nodes}), got {demands.shape}"
            )
        cfg = self.config
        batch = demands.shape[0]
        if cfg.architecture == "constant":
            ones = ad.constant(np.ones((batch, 1)))
            return ad.reshape(tape, ad.matmul(tape, ones, self.params["bias"]), (batch,))
        gs = self.struct_for(graph)
        if cfg.architecture == "mlp":
            if cfg.representation == "raw":
                feats = np.concatenate([demands.transpose(0, 2, 1), demands], axis=2)
            else:
                feats = np.stack([demands.sum(axis=2), demands.sum(axis=1)], axis=2)
            flat = feats.reshape(batch, -1)
            adj = np.broadcast_to(gs.adj_flat, (batch, gs.adj_flat.size))
            caps = np.broadcast_to(gs.cap_vec / max_capacity, (batch, gs.cap_vec.size))
            x = ad.constant(np.concatenate([flat, adj, caps], axis=1))
            weights = [
                (self.params[f"mlp{i}.W"], self.params[f"mlp{i}.b"])
                for i in range(cfg.layers + 1)
            ]
            return ad.reshape(tape, mlp_forward(tape, x, weights), (batch,))

        h = ad.constant(self._node_features(demands, gs, max_capacity))
        x = ad.constant((gs.x_cap / max_capacity).reshape(-1, 1))
        for i in range(cfg.layers):
            pre = f"layer{i}."
            if cfg.architecture == "pew":
                params = PewParams(
                    self.params[pre + "W"],
                    self.params[pre + "Q"],
                    self.params[pre + "K"],
                    self.params[pre + "W1"],
                )
                h = pew_layer(tape, h, gs, x, params, cfg.strict_paper)
            elif cfg.architecture == "gat":
                params = GatParams(
                    self.params[pre + "W"],
                    self.params[pre + "a_dst"],
                    self.params[pre + "a_src"],
                    self.params[pre + "a_edge"],
                )
                h = gat_layer(tape, h, gs, x, params)
            elif cfg.architecture == "gcn":
                h = gcn_layer(tape, h, gs, GcnParams(self.params[pre + "W"], self.params[pre + "b"]))
            else:
                h = sage_layer(
                    tape,
                    h,
                    gs,
                    SageParams(
                        self.params[pre + "W_self"],
                        self.params[pre + "W_neigh"],
                        self.params[pre + "b"],
                    ),
                )
        pooled = ad.reduce_sum(tape, h, axis=1)
        pred = ad.add(tape, ad.matmul(tape, pooled, self.params["head.W"]), self.params["head.b"])
        return ad.reshape(tape, pred, (batch,))

    def forward_samples(self, tape: Tape, dataset, samples) -> tuple[Tensor, np.ndarray]:
        """Forward a heterogeneous sample list, grouping by variation.

        Returns predictions and the positions (into ``samples``) they
        correspond to, since grouping reorders.
        """
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            key = -1 if s.variation_id is None else s.variation_id
            groups.setdefault(key, []).append(i)
        preds, order = [], []
        for key in sorted(groups):
            idxs = groups[key]
            graph = (
                dataset.topology if key == -1 else dataset.variations[key]
            )
            demands = np.stack([samples[i].demands for i in idxs])
            preds.append(
                self.forward(tape, demands, graph, dataset.normalization.max_capacity)
            )
            order.extend(idxs)
        out = preds[0] if len(preds) == 1 else ad.concat(tape, preds, axis=0)
        return out, np.array(order, dtype=np.int64)

    # -- persistence ---------------------------------------------------------

    def export_values(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self.params):
            missing = set(self.params) ^ set(values)
            raise ValidationError(f"checkpoint parameter names mismatch: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(values[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValidationError(
                    f"checkpoint shape mismatch for {k}: {arr.shape} vs {p.shape}"
                )
            p.values = arr.copy()


def build_model(config: ModelConfig, t: Topology, rng: np.random.Generator) -> Predictor:
    """Instantiate a predictor for ``t`` with seed-controlled init."""
    return Predictor(config, t, rng)
