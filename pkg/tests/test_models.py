"""Model layers against dense numpy oracles, the tied-parameter equivalence,
attention normalization, and full predictor behavior."""

import numpy as np
import pytest

import synth
import netmlu.autodiff as ad
from netmlu.errors import ValidationError
from netmlu.models import (
    GatParams,
    GcnParams,
    GraphStruct,
    ModelConfig,
    PewParams,
    SageParams,
    build_model,
    default_layer_count,
    gat_layer,
    gcn_layer,
    mlp_forward,
    pew_layer,
    sage_layer,
    widths_for,
)
from netmlu.traffic import build_datasets

SLOPE = 0.2


def _leaky(v):
    return np.where(v > 0, v, SLOPE * v)


def _closed_in_neighborhood(graph, v):
    """(source node, x feature, param row) per aggregation row of node v."""
    rows = [(e.src, e.capacity, e.id) for e in sorted(graph.in_edges(v), key=lambda e: e.id)]
    rows.append((v, 0.0, None))  # self row, param row filled by caller
    return rows


def _dense_pew(graph, original, h, x_scale, W, Q, K, W1, strict=False):
    """Straightforward per-node reimplementation of the per-edge layer."""
    m = original.n_edges
    active = sorted(graph.node_ids())
    pos = {v: i for i, v in enumerate(active)}
    B = h.shape[0]
    d_out = W.shape[2]
    out = np.zeros((B, len(active), d_out))
    for v in active:
        rows = _closed_in_neighborhood(graph, v)
        msgs, scores = [], []
        for src, cap, eid in rows:
            r = eid if eid is not None else m + v
            g_src = h[:, pos[src]] @ W[r]
            g_dst = h[:, pos[v]] @ W[r]
            q = g_dst @ Q[r]
            k = g_src @ K[r]
            edge = (cap / x_scale) * W1[0, 0] if eid is not None else 0.0
            msgs.append((g_src, eid is not None))
            scores.append(_leaky(q + k + edge).reshape(B))
        s = np.stack(scores, axis=1)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        zeta = e / e.sum(axis=1, keepdims=True)
        acc = np.zeros((B, d_out))
        for j, (g, is_real) in enumerate(msgs):
            if strict and not is_real:
                continue
            acc += zeta[:, j : j + 1] * g
        out[:, pos[v]] = np.maximum(acc, 0.0)
    return out


def _dense_gat(graph, h, x_scale, W, a_dst, a_src, a_edge):
    active = sorted(graph.node_ids())
    pos = {v: i for i, v in enumerate(active)}
    B = h.shape[0]
    Wh = h @ W
    out = np.zeros((B, len(active), W.shape[1]))
    for v in active:
        rows = _closed_in_neighborhood(graph, v)
        msgs, scores = [], []
        for src, cap, eid in rows:
            edge = (cap / x_scale) * a_edge[0, 0] if eid is not None else 0.0
            score = Wh[:, pos[v]] @ a_dst + Wh[:, pos[src]] @ a_src + edge
            scores.append(_leaky(score).reshape(B))
            msgs.append(Wh[:, pos[src]])
        s = np.stack(scores, axis=1)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        zeta = e / e.sum(axis=1, keepdims=True)
        acc = sum(zeta[:, j : j + 1] * g for j, g in enumerate(msgs))
        out[:, pos[v]] = np.maximum(acc, 0.0)
    return out


def _random_struct(rng, n=5, extra=4):
    t = synth.symmetric_graph(n, n + extra, rng)
    return t, GraphStruct(t, t)


# -- hand example --------------------------------------------------------------


def test_pew_layer_literal_two_node_example():
    t = synth.single_edge(10.0)
    gs = GraphStruct(t, t)
    # all-ones transforms, zero scores: every row gets attention 1/2
    P = t.n_edges + t.n_nodes
    W = np.ones((P, 2, 1))
    params = PewParams(
        ad.parameter(W),
        ad.parameter(np.zeros((P, 1, 1))),
        ad.parameter(np.zeros((P, 1, 1))),
        ad.parameter(np.zeros((1, 1))),
    )
    h = np.array([[[1.0, 2.0], [10.0, 20.0]]])  # one sample, nodes 0 and 1
    x = ad.constant((gs.x_cap / 10.0).reshape(-1, 1))
    out = pew_layer(ad.Tape(), ad.constant(h), gs, x, params)
    # node 0 aggregates edge from node 1 (sum 30) and itself (sum 3)
    assert out.values[0, 0, 0] == pytest.approx(0.5 * 30 + 0.5 * 3)
    assert out.values[0, 1, 0] == pytest.approx(0.5 * 3 + 0.5 * 30)
    strict = pew_layer(ad.Tape(), ad.constant(h), gs, x, params, strict_paper=True)
    # self message dropped from the sum, softmax share unchanged
    assert strict.values[0, 0, 0] == pytest.approx(0.5 * 30)
    assert strict.values[0, 1, 0] == pytest.approx(0.5 * 3)


# -- dense oracle comparisons -----------------------------------------------------


@pytest.mark.parametrize("strict", [False, True])
def test_pew_layer_matches_dense_oracle(strict):
    rng = np.random.default_rng(31)
    for k in range(6):
        t, gs = _random_struct(rng, n=4 + k % 3)
        P = t.n_edges + t.n_nodes
        d_in, d_out = 3, 2
        W = rng.standard_normal((P, d_in, d_out))
        Q = rng.standard_normal((P, d_out, 1))
        K = rng.standard_normal((P, d_out, 1))
        W1 = rng.standard_normal((1, 1))
        h = rng.standard_normal((2, t.n_nodes, d_in))
        cap_max = max(e.capacity for e in t.edges)
        params = PewParams(*(ad.parameter(v) for v in (W, Q, K, W1)))
        x = ad.constant((gs.x_cap / cap_max).reshape(-1, 1))
        got = pew_layer(ad.Tape(), ad.constant(h), gs, x, params, strict)
        want = _dense_pew(t, t, h, cap_max, W, Q, K, W1, strict)
        assert np.allclose(got.values, want, atol=1e-12), k


def test_pew_layer_on_variation_subgraph():
    rng = np.random.default_rng(77)
    t = synth.symmetric_graph(7, 12, rng)
    sub = t.subgraph([0, 1, 2, 3, 4])
    gs = GraphStruct(t, sub)
    P = t.n_edges + t.n_nodes
    W = rng.standard_normal((P, 2, 2))
    Q = rng.standard_normal((P, 2, 1))
    K = rng.standard_normal((P, 2, 1))
    W1 = rng.standard_normal((1, 1))
    h = rng.standard_normal((3, 5, 2))
    cap_max = max(e.capacity for e in t.edges)
    params = PewParams(*(ad.parameter(v) for v in (W, Q, K, W1)))
    x = ad.constant((gs.x_cap / cap_max).reshape(-1, 1))
    got = pew_layer(ad.Tape(), ad.constant(h), gs, x, params)
    want = _dense_pew(sub, t, h, cap_max, W, Q, K, W1)
    assert got.values.shape == (3, 5, 2)
    assert np.allclose(got.values, want, atol=1e-12)


def test_gat_layer_matches_dense_oracle():
    rng = np.random.default_rng(32)
    for k in range(6):
        t, gs = _random_struct(rng, n=4 + k % 3)
        d_in, d_out = 3, 2
        W = rng.standard_normal((d_in, d_out))
        a_dst = rng.standard_normal((d_out, 1))
        a_src = rng.standard_normal((d_out, 1))
        a_edge = rng.standard_normal((1, 1))
        h = rng.standard_normal((2, t.n_nodes, d_in))
        cap_max = max(e.capacity for e in t.edges)
        params = GatParams(*(ad.parameter(v) for v in (W, a_dst, a_src, a_edge)))
        x = ad.constant((gs.x_cap / cap_max).reshape(-1, 1))
        got = gat_layer(ad.Tape(), ad.constant(h), gs, x, params)
        want = _dense_gat(t, h, cap_max, W, a_dst, a_src, a_edge)
        assert np.allclose(got.values, want, atol=1e-12), k


def test_gcn_layer_matches_dense_oracle():
    rng = np.random.default_rng(33)
    t, gs = _random_struct(rng)
    n = t.n_nodes
    A = np.zeros((n, n))
    for e in t.edges:
        A[e.src, e.dst] = 1.0
        A[e.dst, e.src] = 1.0
    A += np.eye(n)
    dinv = 1.0 / np.sqrt(A.sum(axis=1))
    norm = A * dinv[:, None] * dinv[None, :]
    W = np.random.default_rng(0).standard_normal((3, 2))
    b = np.random.default_rng(1).standard_normal(2)
    h = np.random.default_rng(2).standard_normal((2, n, 3))
    got = gcn_layer(ad.Tape(), ad.constant(h), gs, GcnParams(ad.parameter(W), ad.parameter(b)))
    want = np.maximum(np.einsum("uv,bvd->bud", norm, h) @ W + b, 0.0)
    assert np.allclose(got.values, want, atol=1e-12)


def test_sage_layer_matches_dense_oracle():
    rng = np.random.default_rng(34)
    t, gs = _random_struct(rng)
    n = t.n_nodes
    mean_in = np.zeros((n, n))
    for e in t.edges:
        mean_in[e.dst, e.src] += 1.0
    tot = mean_in.sum(axis=1, keepdims=True)
    mean_in = np.divide(mean_in, tot, out=np.zeros_like(mean_in), where=tot > 0)
    W_self = rng.standard_normal((3, 2))
    W_neigh = rng.standard_normal((3, 2))
    b = rng.standard_normal(2)
    h = rng.standard_normal((2, n, 3))
    got = sage_layer(
        ad.Tape(),
        ad.constant(h),
        gs,
        SageParams(ad.parameter(W_self), ad.parameter(W_neigh), ad.parameter(b)),
    )
    want = np.maximum(
        h @ W_self + np.einsum("uv,bvd->bud", mean_in, h) @ W_neigh + b, 0.0
    )
    assert np.allclose(got.values, want, atol=1e-12)


def test_mlp_forward_matches_numpy():
    rng = np.random.default_rng(35)
    x = rng.standard_normal((4, 6))
    W0, b0 = rng.standard_normal((6, 5)), rng.standard_normal(5)
    W1, b1 = rng.standard_normal((5, 1)), rng.standard_normal(1)
    out = mlp_forward(
        ad.Tape(),
        ad.constant(x),
        [(ad.parameter(W0), ad.parameter(b0)), (ad.parameter(W1), ad.parameter(b1))],
    )
    want = np.maximum(x @ W0 + b0, 0.0) @ W1 + b1
    assert np.allclose(out.values, want, atol=1e-12)


# -- attention coefficients ----------------------------------------------------------


def test_attention_sums_per_node():
    rng = np.random.default_rng(36)
    for k in range(30):
        t, gs = _random_struct(rng, n=4 + k % 4)
        P = t.n_edges + t.n_nodes
        params = PewParams(
            ad.parameter(rng.standard_normal((P, 2, 2))),
            ad.parameter(rng.standard_normal((P, 2, 1))),
            ad.parameter(rng.standard_normal((P, 2, 1))),
            ad.parameter(rng.standard_normal((1, 1))),
        )
        h = rng.standard_normal((2, t.n_nodes, 2))
        x = ad.constant((gs.x_cap / 40.0).reshape(-1, 1))
        collected = []
        pew_layer(ad.Tape(), ad.constant(h), gs, x, params, attention_out=collected)
        (zeta,) = collected
        z = zeta.values
        assert np.all(z >= 0)
        sums = np.zeros((2, gs.n_active))
        np.add.at(sums, (slice(None), gs.seg), z)
        assert np.allclose(sums, 1.0, atol=1e-12)


# -- tied-parameter equivalence --------------------------------------------------------


def test_tied_pew_equals_gat():
    rng = np.random.default_rng(37)
    for k in range(5):
        t, gs = _random_struct(rng, n=4 + k)
        d_in, d_out = 3, 4
        W = rng.standard_normal((d_in, d_out))
        a_dst = rng.standard_normal((d_out, 1))
        a_src = rng.standard_normal((d_out, 1))
        a_edge = rng.standard_normal((1, 1))
        P = t.n_edges + t.n_nodes
        pew = PewParams(
            ad.parameter(np.broadcast_to(W, (P, d_in, d_out)).copy()),
            ad.parameter(np.broadcast_to(a_dst, (P, d_out, 1)).copy()),
            ad.parameter(np.broadcast_to(a_src, (P, d_out, 1)).copy()),
            ad.parameter(a_edge.copy()),
        )
        gat = GatParams(*(ad.parameter(v) for v in (W, a_dst, a_src, a_edge)))
        h = rng.standard_normal((2, t.n_nodes, d_in))
        cap_max = max(e.capacity for e in t.edges)
        x = ad.constant((gs.x_cap / cap_max).reshape(-1, 1))
        a = pew_layer(ad.Tape(), ad.constant(h), gs, x, pew)
        b = gat_layer(ad.Tape(), ad.constant(h), gs, x, gat)
        assert np.allclose(a.values, b.values, atol=1e-9), k


# -- configuration and widths -----------------------------------------------------------


def test_width_grids():
    assert widths_for("pew", "raw") == (4, 16)
    assert widths_for("pew", "sum") == (4, 16)
    assert widths_for("gat", "raw") == (8, 32)
    assert widths_for("gcn", "sum") == (8, 32)
    assert widths_for("sage", "raw") == (8, 32)
    assert widths_for("mlp", "sum") == (64, 256)
    assert widths_for("mlp", "raw") == (64, 128)


def test_model_config_validation():
    ModelConfig("pew", "raw", 16, 3, 1e-3).validate()
    ModelConfig("constant", "sum", 0, 1, 1e-2).validate()
    with pytest.raises(ValidationError, match="architecture"):
        ModelConfig("transformer", "raw", 16, 3, 1e-3).validate()
    with pytest.raises(ValidationError, match="representation"):
        ModelConfig("pew", "dense", 16, 3, 1e-3).validate()
    with pytest.raises(ValidationError, match="width"):
        ModelConfig("pew", "raw", 8, 3, 1e-3).validate()
    with pytest.raises(ValidationError, match="layer"):
        ModelConfig("pew", "raw", 16, 0, 1e-3).validate()
    with pytest.raises(ValidationError, match="learning rate"):
        ModelConfig("pew", "raw", 16, 3, 0.0).validate()


def test_default_layer_count_is_diameter():
    t = synth.line_graph([10.0, 10.0, 10.0])
    assert default_layer_count(t) == 3


# -- assembled predictor ------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_datasets():
    t = synth.symmetric_graph(5, 7, np.random.default_rng(50))
    return build_datasets(t, "ecmp", n_per_split=4, master_seed=1, check_trivial=False)


@pytest.mark.parametrize(
    "arch,rep",
    [
        ("pew", "raw"),
        ("pew", "sum"),
        ("gat", "sum"),
        ("gcn", "raw"),
        ("sage", "sum"),
        ("mlp", "raw"),
        ("mlp", "sum"),
        ("constant", "sum"),
    ],
)
def test_predictor_forward_shapes(tiny_datasets, arch, rep):
    train = tiny_datasets[0]
    t = train.topology
    width = widths_for(arch, rep)[0] if arch != "constant" else 0
    mc = ModelConfig(arch, rep, width, 2, 1e-3)
    model = build_model(mc, t, np.random.default_rng(0))
    demands = np.stack([s.demands for s in train.samples])
    out = model.forward(ad.Tape(), demands, t, train.normalization.max_capacity)
    assert out.values.shape == (4,)
    assert np.all(np.isfinite(out.values))


def test_predictor_deterministic_init():
    t = synth.symmetric_graph(5, 7, np.random.default_rng(50))
    mc = ModelConfig("pew", "sum", 4, 2, 1e-3)
    m1 = build_model(mc, t, np.random.default_rng(3))
    m2 = build_model(mc, t, np.random.default_rng(3))
    assert set(m1.params) == set(m2.params)
    for k in m1.params:
        assert np.array_equal(m1.params[k].values, m2.params[k].values)


def test_predictor_mlp_input_dim():
    t = synth.symmetric_graph(5, 7, np.random.default_rng(50))
    mc = ModelConfig("mlp", "raw", 64, 2, 1e-3)
    model = build_model(mc, t, np.random.default_rng(0))
    n, m = t.n_nodes, t.n_edges
    assert model.params["mlp0.W"].shape == (2 * n * n + n * n + m, 64)
    # depth: input layer + (layers-1) hidden + scalar head
    assert model.params["mlp2.W"].shape[1] == 1


def test_export_load_roundtrip_and_guards():
    t = synth.symmetric_graph(5, 7, np.random.default_rng(50))
    mc = ModelConfig("gat", "sum", 8, 2, 1e-3)
    model = build_model(mc, t, np.random.default_rng(0))
    vals = model.export_values()
    other = build_model(mc, t, np.random.default_rng(9))
    other.load_values(vals)
    for k in vals:
        assert np.array_equal(other.params[k].values, vals[k])
    bad = dict(vals)
    bad.pop("head.W")
    with pytest.raises(ValidationError, match="mismatch"):
        other.load_values(bad)
    bad2 = dict(vals)
    bad2["head.W"] = np.zeros((3, 3))
    with pytest.raises(ValidationError, match="shape"):
        other.load_values(bad2)


def test_forward_samples_orders_variations():
    t = synth.symmetric_graph(12, 20, np.random.default_rng(6))
    datasets = build_datasets(
        t, "ecmp", n_per_split=4, variations=2, master_seed=3, check_trivial=False
    )
    train = datasets[0]
    mc = ModelConfig("pew", "sum", 4, 2, 1e-3)
    model = build_model(mc, t, np.random.default_rng(0))
    # interleave the two variations so grouping must reorder
    samples = [train.samples[0], train.samples[2], train.samples[1], train.samples[3]]
    out, order = model.forward_samples(ad.Tape(), train, samples)
    assert sorted(order.tolist()) == [0, 1, 2, 3]
    for j, pos in enumerate(order):
        s = samples[pos]
        single = model.forward(
            ad.Tape(),
            s.demands[None],
            train.graph_for(s),
            train.normalization.max_capacity,
        )
        assert out.values[j] == pytest.approx(single.values[0], abs=1e-12)


def test_full_model_gradcheck_small():
    t = synth.symmetric_graph(4, 5, np.random.default_rng(51))
    datasets = build_datasets(t, "ecmp", n_per_split=2, master_seed=2, check_trivial=False)
    train = datasets[0]
    demands = np.stack([s.demands for s in train.samples])
    labels = train.labels()
    for arch, rep, width in [("pew", "sum", 4), ("gat", "raw", 8)]:
        mc = ModelConfig(arch, rep, width, 2, 1e-3)
        model = build_model(mc, t, np.random.default_rng(1))

        def loss_fn(tape):
            pred = model.forward(tape, demands, t, train.normalization.max_capacity)
            return ad.mse_loss(tape, pred, ad.constant(labels))

        err = ad.gradcheck(loss_fn, model.params, np.random.default_rng(5), n_samples=40)
        assert err < 1e-4, (arch, err)
