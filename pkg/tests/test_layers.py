import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quatgraph.autograd import check_gradients
from quatgraph.graph import Graph, GraphBatch, normalize_adjacency
from quatgraph.layers import (
    ConfigError,
    GCNLayer,
    GraphHead,
    Model,
    ModelConfig,
    NodeHead,
    QGNNLayer,
    concat_readout,
    from_rows,
    gcn_forward,
    glorot_init,
    graph_head_forward,
    load_checkpoint,
    node_head_forward,
    param_count,
    qgnn_forward,
    save_checkpoint,
    sum_pool,
    to_rows,
)
from quatgraph.qalg import LAYER_TOL, DimensionError, QTensor

from .oracles import dense_normalized_adjacency, gcn_param_count, qgnn_param_count, quaternion_block


def random_graph(rng, n, p=0.3):
    pairs = np.array([(a, b) for a in range(n) for b in range(a + 1, n)]).reshape(-1, 2)
    return pairs[rng.random(len(pairs)) < p]


def random_qtensor(rng, rows, cols):
    return QTensor(*rng.normal(size=(4, rows, cols)))


def test_qgnn_forward_matches_block_matrix_oracle():
    rng = np.random.default_rng(0)
    n, q_in, q_out = 5, 3, 2
    edges = random_graph(rng, n, 0.5)
    A = dense_normalized_adjacency(edges, n)
    H = random_qtensor(rng, n, q_in)
    W = random_qtensor(rng, q_in, q_out)
    # the layer weight is [in_q x out_q]; the quaternion map on each node is its transpose
    M = quaternion_block(*(c.T for c in W.components()))
    stacked = np.stack([M @ np.concatenate([c[v] for c in H.components()]) for v in range(n)])
    expected = np.maximum(A @ stacked, 0.0)
    out = qgnn_forward(QGNNLayer(W, None, "relu"), A, H)
    np.testing.assert_allclose(to_rows(out), expected, atol=LAYER_TOL, rtol=0)


def test_qgnn_forward_with_bias_and_identity():
    rng = np.random.default_rng(1)
    n = 4
    A = normalize_adjacency(random_graph(rng, n), n)
    H, W, b = random_qtensor(rng, n, 2), random_qtensor(rng, 2, 3), random_qtensor(rng, 3, 1)
    plain = qgnn_forward(QGNNLayer(W, None, "identity"), A, H)
    biased = qgnn_forward(QGNNLayer(W, b, "identity"), A, H)
    np.testing.assert_allclose(to_rows(biased) - to_rows(plain), np.tile(to_rows(QTensor(*(c.T for c in b.components()))), (n, 1)),
                               atol=1e-12)


def test_qgnn_forward_shape_errors():
    rng = np.random.default_rng(2)
    A = np.eye(3)
    with pytest.raises(DimensionError):
        qgnn_forward(QGNNLayer(random_qtensor(rng, 2, 2)), A, random_qtensor(rng, 3, 3))
    with pytest.raises(DimensionError):
        qgnn_forward(QGNNLayer(random_qtensor(rng, 2, 2)), np.eye(4), random_qtensor(rng, 3, 2))


def test_gcn_forward_dense_reference():
    rng = np.random.default_rng(3)
    n = 6
    A = dense_normalized_adjacency(random_graph(rng, n), n)
    X, W, b = rng.normal(size=(n, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    np.testing.assert_allclose(gcn_forward(GCNLayer(W, b), A, X), np.maximum(A @ X @ W + b, 0), atol=1e-12)
    with pytest.raises(DimensionError):
        gcn_forward(GCNLayer(W), A, rng.normal(size=(n, 5)))


def test_node_head_is_aggregating_softmax():
    rng = np.random.default_rng(4)
    n = 5
    A = dense_normalized_adjacency(random_graph(rng, n), n)
    X, W = rng.normal(size=(n, 8)), rng.normal(size=(8, 3))
    P = node_head_forward(NodeHead(W), A, X)
    Z = A @ X @ W
    expected = np.exp(Z - Z.max(1, keepdims=True))
    np.testing.assert_allclose(P, expected / expected.sum(1, keepdims=True), atol=1e-12)


@given(st.integers(1, 50), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_degenerates_to_gcn(n, d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    edges = random_graph(rng, n, min(1.0, 3.0 / n))
    A = normalize_adjacency(edges, n)
    X = rng.normal(size=(n, d_in))
    Wr = rng.normal(size=(d_in, d_out))
    zero = np.zeros_like(Wr)
    gcn = gcn_forward(GCNLayer(Wr), A, X)
    out = qgnn_forward(QGNNLayer(QTensor(Wr, zero, zero, zero)), A, QTensor(X, X, X, X))
    for comp in out.components():
        np.testing.assert_allclose(comp, gcn, atol=LAYER_TOL, rtol=0)


def test_single_component_perturbation_spreads():
    rng = np.random.default_rng(5)
    n = 4
    A = normalize_adjacency([(0, 1), (1, 2), (2, 3)], n)
    W = random_qtensor(rng, 2, 3)
    H = random_qtensor(rng, n, 2)
    layer = QGNNLayer(W, None, "identity")
    base = qgnn_forward(layer, A, H)
    i = np.array(H.i)
    i[1, 0] += 0.5
    moved = qgnn_forward(layer, A, QTensor(H.r, i, H.j, H.k))
    for a, b in zip(base.components(), moved.components()):
        assert np.abs(a - b).max() > 1e-6


@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    edges = random_graph(rng, n, 0.4)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    H, W = random_qtensor(rng, n, 2), random_qtensor(rng, 2, 2)
    layer = QGNNLayer(W)
    out = to_rows(qgnn_forward(layer, normalize_adjacency(edges, n), H))
    # node v is renamed inv[v]
    H_perm = from_rows(to_rows(H)[perm])
    out_perm = to_rows(qgnn_forward(layer, normalize_adjacency(inv[edges], n), H_perm))
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


def test_concat_readout_and_sum_pool():
    rng = np.random.default_rng(6)
    h1, h2 = random_qtensor(rng, 5, 2), random_qtensor(rng, 5, 3)
    e = concat_readout([h1, h2])
    assert e.shape == (5, 5)
    np.testing.assert_array_equal(e.j[:, 2:], h2.j)
    batch = GraphBatch.from_graphs([Graph(2, [], np.zeros((2, 1))), Graph(3, [], np.zeros((3, 1)))])
    pooled = sum_pool(e, batch)
    np.testing.assert_allclose(pooled.k[1], e.k[2:].sum(axis=0), atol=1e-14)
    with pytest.raises(DimensionError):
        concat_readout([])
    with pytest.raises(DimensionError):
        sum_pool(random_qtensor(rng, 4, 1), batch)


def test_graph_head():
    rng = np.random.default_rng(7)
    e = random_qtensor(rng, 3, 2)
    W = rng.normal(size=(8, 2))
    P = graph_head_forward(GraphHead(W), e)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(np.log(P[:, 1] / P[:, 0]), to_rows(e) @ (W[:, 1] - W[:, 0]), atol=1e-12)
    with pytest.raises(DimensionError):
        graph_head_forward(GraphHead(rng.normal(size=(7, 2))), e)


def test_glorot_bounds():
    w = glorot_init((30, 10), seed=0)
    bound = np.sqrt(6 / 40)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    np.testing.assert_array_equal(w, glorot_init((30, 10), seed=0))


def test_model_config_validation():
    for bad in ({"arch": "gat"}, {"task": "edge"}, {"activation": "tanh"}, {"num_layers": 0},
                {"hidden": 0}, {"dropout": 1.0}):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


IMDB_GCN = [17152, 83200, 149248, 215296, 281344]
IMDB_QGNN = [17152, 34048, 50944, 67840, 84736]


@pytest.mark.parametrize("layers", [1, 2, 3, 4, 5])
def test_parameter_table(layers):
    gcn = Model(ModelConfig(arch="gcn", num_layers=layers, hidden=256), 65, 2)
    qgnn = Model(ModelConfig(arch="qgnn", num_layers=layers, hidden=64), 65, 2)
    assert param_count(gcn) == IMDB_GCN[layers - 1] == gcn_param_count(65, 256, layers, 2)
    assert param_count(qgnn) == IMDB_QGNN[layers - 1] == qgnn_param_count(65, 64, layers, 2)


@given(st.integers(1, 64))
def test_hidden_layer_ratio_is_one_quarter(n):
    gcn = Model(ModelConfig(arch="gcn", num_layers=2, hidden=4 * n), 1, 1).param_shapes()["layer1.weight"]
    qgnn = Model(ModelConfig(arch="qgnn", num_layers=2, hidden=n), 1, 1).param_shapes()["layer1.weight"]
    assert 4 * int(np.prod(qgnn)) == int(np.prod(gcn))


def test_bias_adds_parameters():
    cfg = ModelConfig(arch="qgnn", num_layers=2, hidden=3, bias=True)
    m = Model(cfg, 5, 2)
    assert m.param_count() == 4 * 5 * 3 + 4 * 3 * 3 + 24 * 2 + 12 + 12 + 2


def _mutag_like_batch(rng, sizes=(5, 6, 4), dim=3):
    graphs = [Graph(n, random_graph(rng, n, 0.5), rng.normal(size=(n, dim)), label=g % 2)
              for g, n in enumerate(sizes)]
    return graphs, GraphBatch.from_graphs(graphs)


@pytest.mark.parametrize("arch", ["qgnn", "gcn"])
def test_batch_equals_per_graph_forward(arch):
    rng = np.random.default_rng(8)
    graphs, batch = _mutag_like_batch(rng)
    model = Model(ModelConfig(arch=arch, num_layers=2, hidden=3, bias=True), 3, 2, seed=1)
    whole = model.predict_proba(batch)
    for g, graph in enumerate(graphs):
        single = model.predict_proba(GraphBatch.from_graphs([graph]))
        np.testing.assert_allclose(whole[g], single[0], atol=1e-10)
    emb = model.embeddings(batch, 2)
    for graph, lo, hi in zip(graphs, batch.node_offsets[:-1], batch.node_offsets[1:]):
        np.testing.assert_allclose(emb[lo:hi], model.embeddings(GraphBatch.from_graphs([graph]), 2), atol=1e-10)


def test_model_layer_matches_functional_forward():
    rng = np.random.default_rng(9)
    graphs, batch = _mutag_like_batch(rng)
    model = Model(ModelConfig(num_layers=2, hidden=2, bias=True), 3, 2, seed=2)
    X = batch.features
    h1 = qgnn_forward(model.layer(0), batch.norm_adj, QTensor(X, X, X, X))
    h2 = qgnn_forward(model.layer(1), batch.norm_adj, h1)
    np.testing.assert_allclose(model.embeddings(batch, 1), to_rows(h1), atol=1e-12)
    np.testing.assert_allclose(model.embeddings(batch, 2), to_rows(h2), atol=1e-12)
    head = model.head()
    probs = graph_head_forward(head, sum_pool(concat_readout([h1, h2]), batch))
    np.testing.assert_allclose(model.predict_proba(batch), probs, atol=1e-12)


def test_node_model_matches_functional_forward():
    rng = np.random.default_rng(10)
    n = 7
    graph = Graph(n, random_graph(rng, n, 0.4), rng.normal(size=(n, 4)), labels=np.arange(n) % 3)
    model = Model(ModelConfig(task="node", num_layers=1, hidden=2), 4, 3, seed=3)
    X = graph.features
    h = qgnn_forward(model.layer(0), graph.norm_adj, QTensor(X, X, X, X))
    np.testing.assert_allclose(model.predict_proba(graph), node_head_forward(model.head(), graph.norm_adj, to_rows(h)),
                               atol=1e-12)


@pytest.mark.parametrize("arch", ["qgnn", "gcn"])
@pytest.mark.parametrize("task", ["graph", "node"])
@pytest.mark.parametrize("bias", [False, True])
def test_model_gradients(arch, task, bias):
    rng = np.random.default_rng(11)
    if task == "graph":
        _, data = _mutag_like_batch(rng, sizes=(6, 5))
        data.graphs[0].features[:] *= 0.5
    else:
        data = Graph(6, random_graph(rng, 6, 0.5), 0.5 * rng.normal(size=(6, 3)), labels=np.arange(6) % 2)
    model = Model(ModelConfig(arch=arch, task=task, num_layers=2, hidden=3, bias=bias), 3, 2, seed=4)
    for name, value in model.params.items():
        if name.endswith(".bias"):
            value[...] = 0.1 * rng.normal(size=value.shape)
    assert check_gradients(model, data).max_rel_error < 1e-4


def test_feature_dim_mismatch():
    rng = np.random.default_rng(12)
    _, batch = _mutag_like_batch(rng)
    with pytest.raises(ConfigError):
        Model(ModelConfig(), 4, 2).predict_proba(batch)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    _, batch = _mutag_like_batch(rng)
    model = Model(ModelConfig(num_layers=3, hidden=2, bias=True, dropout=0.25), 3, 2, seed=5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config and loaded.seed == 5
    for k in model.params:
        np.testing.assert_array_equal(loaded.params[k], model.params[k])
    np.testing.assert_array_equal(loaded.predict_proba(batch), model.predict_proba(batch))
    raw = path.read_bytes()
    assert raw[:8] == b"QGCKPT01"
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short")


def test_params_validated():
    with pytest.raises(ConfigError):
        Model(ModelConfig(), 3, 2, params={"head.weight": np.zeros((256, 2))})
    with pytest.raises(ConfigError):
        Model(ModelConfig(hidden=2), 3, 2, params={"layer0.weight": np.zeros((4, 3, 2)), "head.weight": np.zeros((9, 2))})


def test_glorot_variance():
    w = glorot_init((100, 100), seed=1)
    assert abs(w.var() / (2 / 200) - 1) < 0.2


@pytest.mark.parametrize("sparse", [False, True])
def test_input_dropout_masks_components_independently(sparse):
    from quatgraph.autograd import Tape
    from quatgraph.graph import CSRMatrix

    n = 400
    feats = np.ones((n, 1))
    graph = Graph(n, [], CSRMatrix.from_dense(feats) if sparse else feats, labels=np.zeros(n, dtype=int))
    params = {"layer0.weight": np.array([1.0, 0.0, 0.0, 0.0]).reshape(4, 1, 1), "head.weight": np.zeros((4, 2))}
    model = Model(ModelConfig(task="node", hidden=1, activation="identity", dropout=0.5), 1, 2, params=params)
    tape = Tape()
    _, hidden = model.forward(tape, graph, training=True, rng=np.random.default_rng(0))
    out = tape.value(hidden[0])
    # a real weight copies each input component, so the output shows the four masks
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert all((out[:, a] != out[:, b]).any() for a in range(4) for b in range(a + 1, 4))
    assert abs(out.mean() - 1.0) < 0.1
