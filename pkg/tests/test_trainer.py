import csv
import json
import math
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quatgraph.autograd import NonFiniteError
from quatgraph.datasets import build_text_graph, load_tu
from quatgraph.graph import Graph, degree_onehot_features
from quatgraph.layers import ConfigError, Model, ModelConfig, save_checkpoint, load_checkpoint
from quatgraph.trainer import (
    AdamState,
    Metrics,
    TrainConfig,
    adam_step,
    cross_entropy,
    export_embeddings,
    run_graph_task,
    run_node_task,
    run_text_task,
    text_split_masks,
)

DATA = Path(__file__).resolve().parents[1] / "data"


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    np.testing.assert_array_equal(state.m["w"], 0.0)
    np.testing.assert_array_equal(state.v["w"], 0.0)


def test_adam_first_step():
    # bias-corrected moments are both 1, so the step is lr / (1 + eps)
    p = {"w": np.array([0.5])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.01)
    assert p["w"][0] == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-15)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0, 0.1))
def test_adam_matches_scalar_reference(grads, wd):
    theta, m, v = 0.3, 0.0, 0.0
    p = {"w": np.array([0.3])}
    state = AdamState()
    for t, g in enumerate(grads, 1):
        gg = g + wd * theta
        m = 0.9 * m + 0.1 * gg
        v = 0.999 * v + 0.001 * gg * gg
        theta -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(p, {"w": np.array([g])}, state, lr=0.01, weight_decay=wd)
    assert p["w"][0] == pytest.approx(theta, abs=1e-12)


def test_adam_rejects_nan():
    p = {"w": np.ones(2)}
    with pytest.raises(NonFiniteError, match="'w'"):
        adam_step(p, {"w": np.array([1.0, np.nan])}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], 1.0)


def test_cross_entropy_examples():
    assert cross_entropy(np.eye(3), [0, 1, 2]) == 0.0
    assert cross_entropy(np.full((4, 5), 0.2), [0, 1, 2, 3]) == pytest.approx(math.log(5))
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=6)
    labels = rng.integers(0, 3, size=6)
    mask = np.array([1, 0, 1, 1, 0, 1], dtype=bool)
    assert cross_entropy(p, labels, mask) == pytest.approx(-np.mean(np.log(p[mask, labels[mask]])))
    with pytest.raises(ValueError):
        cross_entropy(p, labels, np.zeros(6, dtype=bool))


def test_train_config_validation():
    for bad in ({"lr": 0}, {"epochs": 0}, {"batch_size": 0}, {"task": "edge"}, {"weight_decay": -1},
                {"folds": 1}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_metrics_json(tmp_path):
    m = Metrics({"a": 1}, [{"fold": 0}], 0.5, 0.1, 3, 1.25)
    m.write(tmp_path / "m.json")
    loaded = json.loads((tmp_path / "m.json").read_text())
    assert loaded == {"config": {"a": 1}, "per_fold": [{"fold": 0}], "mean": 0.5, "std": 0.1,
                      "selected_epoch": 3, "wall_time": 1.25}


# ---------------------------------------------------------------------------
# protocols on separable synthetic data
# ---------------------------------------------------------------------------


def cliques_and_paths(count=40, max_degree=7):
    graphs = []
    for g in range(count):
        n = 4 + g % 5
        if g % 2:
            edges = [(a, b) for a in range(n) for b in range(a + 1, n)]
        else:
            edges = [(a, a + 1) for a in range(n - 1)]
        graphs.append(Graph(n, edges, degree_onehot_features(edges, n, max_degree), label=g % 2))
    return SimpleNamespace(graphs=graphs)


def test_graph_task_separable():
    cfg = TrainConfig(lr=0.01, epochs=50, seed=0)
    m = run_graph_task(cliques_and_paths(), ModelConfig(num_layers=1, hidden=4), cfg)
    assert m.mean == 1.0
    assert len(m.per_fold) == 10 and all(len(f["test_acc"]) == 50 for f in m.per_fold)
    assert sum(f["n_test"] for f in m.per_fold) == 40


def test_graph_task_deterministic_and_parallel_agrees():
    data = cliques_and_paths(20)
    cfg = TrainConfig(lr=0.01, epochs=5, folds=4, seed=3)
    model_cfg = ModelConfig(num_layers=2, hidden=2, dropout=0.2)
    a = run_graph_task(data, model_cfg, cfg).to_json()
    b = run_graph_task(data, model_cfg, cfg, jobs=2).to_json()
    for d in (a, b):
        d.pop("wall_time")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_graph_task_selects_best_mean_epoch():
    m = run_graph_task(cliques_and_paths(20), ModelConfig(hidden=2), TrainConfig(lr=0.01, epochs=6, folds=4))
    acc = np.array([f["test_acc"] for f in m.per_fold])
    best = int(np.argmax(acc.mean(axis=0)))
    assert m.selected_epoch == best + 1
    assert m.mean == pytest.approx(acc[:, best].mean()) and m.std == pytest.approx(acc[:, best].std())
    assert 0 <= m.mean <= 1 and m.std >= 0


def test_graph_task_rejects_node_model_and_mixed_dims():
    data = cliques_and_paths(10)
    with pytest.raises(ConfigError):
        run_graph_task(data, ModelConfig(task="node"), TrainConfig())
    data.graphs[0] = Graph(2, [(0, 1)], np.zeros((2, 3)), label=0)
    with pytest.raises(ConfigError):
        run_graph_task(data, ModelConfig(), TrainConfig(folds=2))


@pytest.mark.skipif(not (DATA / "MUTAG").exists(), reason="MUTAG not fetched")
def test_mutag_single_fold_beats_majority():
    ds = load_tu(DATA / "MUTAG")
    m = run_graph_task(ds, ModelConfig(num_layers=2, hidden=16, bias=True), TrainConfig(lr=1e-2, epochs=30),
                       only_folds=[1])
    assert len(m.per_fold) == 1
    assert m.mean > 125 / 188


def two_communities(n=40, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    labels = (np.arange(n) >= half).astype(int)
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)
             if labels[a] == labels[b] and rng.random() < 0.3]
    pairs += [(0, half)]
    features = np.eye(2)[labels]
    return SimpleNamespace(graph=Graph(n, pairs, features, labels=labels))


def test_node_task_separable_and_masks_disjoint():
    m = run_node_task(two_communities(), ModelConfig(task="node", hidden=2),
                      TrainConfig(task="node", lr=0.05, epochs=30, splits=3))
    assert m.mean == 1.0
    for split in m.per_fold:
        assert split["n_train"] + split["n_val"] + split["n_test"] == 40
        assert 1 <= split["best_epoch"] <= 30


def test_node_task_loss_non_increasing_first_epochs():
    m = run_node_task(two_communities(), ModelConfig(task="node", hidden=2),
                      TrainConfig(task="node", lr=1e-3, epochs=10, splits=1, seed=0))
    loss = m.per_fold[0]["train_loss"]
    assert all(b <= a + 1e-12 for a, b in zip(loss, loss[1:]))


def test_node_task_rejects_graph_model():
    with pytest.raises(ConfigError):
        run_node_task(two_communities(), ModelConfig(task="graph"), TrainConfig(task="node"))


def toy_corpus():
    rng = np.random.default_rng(0)
    pos, neg = ["good", "great", "fine", "nice", "happy"], ["bad", "awful", "poor", "sad", "ugly"]
    corpus = []
    for d in range(20):
        words = pos if d % 2 == 0 else neg
        corpus.append(("pos" if d % 2 == 0 else "neg", list(rng.choice(words, size=6))))
    return build_text_graph(corpus, train_docs=np.arange(14), test_docs=np.arange(14, 20))


def test_text_task_toy_corpus():
    ds = toy_corpus()
    m = run_text_task(ds, ModelConfig(task="node", hidden=4),
                      TrainConfig(task="text", lr=0.02, epochs=60, splits=3, val_fraction=0.15))
    assert m.mean == 1.0
    for run in m.per_fold:
        assert run["n_test"] == 6 and run["n_train"] + run["n_val"] == 14


def test_text_task_needs_validation_docs():
    with pytest.raises(ConfigError):
        run_text_task(toy_corpus(), ModelConfig(task="node"), TrainConfig(task="text", val_fraction=0.0))


def test_word_nodes_never_enter_any_split():
    ds = toy_corpus()
    assert (ds.graph.labels[ds.word_mask] == -1).all()
    for seed in range(5):
        for mask in text_split_masks(ds, 0.2, seed):
            assert not (mask & ds.word_mask).any()


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def test_export_embeddings_known_values(tmp_path):
    # one node, no edges: A_hat = [1]; x = [1]; weight components (1, 2, 3, 4)
    graph = Graph(1, [], np.array([[1.0]]), labels=np.array([0]))
    params = {"layer0.weight": np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1), "head.weight": np.zeros((4, 2))}
    model = Model(ModelConfig(task="node", hidden=1, activation="identity"), 1, 2, params=params)
    path = tmp_path / "e.csv"
    assert export_embeddings(model, SimpleNamespace(graph=graph, node_ids=["n0"]), 1, path) == 1
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["node_id", "label", "x0", "x1", "x2", "x3"]
    # duplicated input (1,1,1,1) times W with components (1,2,3,4): r = 1-2-3-4, i = 2+1-4+3, ...
    assert rows[1][:2] == ["n0", "0"]
    assert [float(v) for v in rows[1][2:]] == [-8.0, 2.0, 6.0, 4.0]


def test_export_embeddings_batch_and_reexport(tmp_path):
    data = cliques_and_paths(4)
    model = Model(ModelConfig(num_layers=2, hidden=3), 8, 2, seed=1)
    save_checkpoint(model, tmp_path / "m.ckpt")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    n = export_embeddings(model, data, 2, a)
    export_embeddings(load_checkpoint(tmp_path / "m.ckpt"), data, 2, b)
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(a.open()))
    assert n == sum(g.num_nodes for g in data.graphs) == len(rows) - 1
    assert all(len(r) == 4 * 3 + 2 for r in rows)
    assert rows[1][0] == "0:0" and rows[-1][0] == f"3:{data.graphs[3].num_nodes - 1}"
    with pytest.raises(ConfigError):
        export_embeddings(model, data, 3, a)
