"""Adam, cross-entropy, and the three evaluation protocols.

Graph task: k-fold cross-validation.  Every epoch the test accuracy of each
fold is recorded; the reported epoch is the one with the best mean test
accuracy across folds, and the result is that epoch's mean and std.  This
follows the common GIN-style protocol and is optimistic compared with
held-out model selection.

Node and text tasks: repeated random splits; each split reports the test
accuracy at its best validation epoch (first one on ties).
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import NonFiniteError, backward
from .graph import Graph, GraphBatch, kfold_indices, stratified_split
from .layers import ConfigError, Model, ModelConfig

TASKS = ("graph", "node", "text")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "graph"
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 4
    weight_decay: float = 0.0
    seed: int = 0
    folds: int = 10  # graph task
    splits: int = 10  # node task: number of random splits; text task: number of runs
    fractions: tuple = (0.6, 0.2, 0.2)
    val_fraction: float = 0.1  # text task: share of training documents held out

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need lr > 0, epochs >= 1, batch_size >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.folds < 2 or self.splits < 1:
            raise ConfigError("need folds >= 2 and splits >= 1")
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))


# ---------------------------------------------------------------------------
# optimisation primitives
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One in-place Adam update with bias correction; L2 decay is added to the gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if weight_decay:
            g = g + weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def cross_entropy(probabilities, labels, mask=None) -> float:
    """Mean ``-log p[label]`` over the selected rows."""
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(p.shape[0]) if mask is None else np.asarray(mask)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    if rows.size == 0:
        raise ValueError("cross-entropy over an empty mask")
    lab = labels[rows] if labels.shape[0] == p.shape[0] else labels
    with np.errstate(divide="ignore"):
        return float(-np.log(p[rows, lab]).mean())


def accuracy(probabilities, labels, rows=None) -> float:
    p = np.asarray(probabilities)
    labels = np.asarray(labels)
    if rows is not None:
        p, labels = p[rows], labels[rows]
    return float(np.mean(np.argmax(p, axis=1) == labels)) if labels.size else float("nan")


def train_step(model: Model, state: AdamState, data, cfg: TrainConfig, rng, rows=None) -> float:
    tape, loss, _ = model.loss(data, rows=rows, training=True, rng=rng)
    value = float(tape.value(loss))
    if not np.isfinite(value):
        raise NonFiniteError(f"loss became {value} at step {state.t + 1}")
    adam_step(model.params, backward(tape, loss), state, cfg.lr, cfg.weight_decay)
    return value


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    config: dict
    per_fold: list
    mean: float
    std: float
    selected_epoch: int | None = None
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {"config": self.config, "per_fold": self.per_fold, "mean": self.mean, "std": self.std,
                "selected_epoch": self.selected_epoch, "wall_time": self.wall_time}

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _summary(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std())


def _map(fn, jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


# ---------------------------------------------------------------------------
# graph classification
# ---------------------------------------------------------------------------


def _train_graph_fold(args):
    graphs, train_idx, test_idx, model_cfg, cfg, in_dim, num_classes, fold = args
    seed = cfg.seed + fold
    model = Model(model_cfg, in_dim, num_classes, seed=seed)
    rng = np.random.default_rng(seed)
    state = AdamState()
    test_batch = GraphBatch.from_graphs([graphs[i] for i in test_idx])
    losses, test_acc = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(train_idx)
        epoch_loss = []
        for s in range(0, len(order), cfg.batch_size):
            batch = GraphBatch.from_graphs([graphs[i] for i in order[s:s + cfg.batch_size]])
            epoch_loss.append(train_step(model, state, batch, cfg, rng))
        losses.append(float(np.mean(epoch_loss)))
        test_acc.append(accuracy(model.predict_proba(test_batch), test_batch.labels))
    return {"fold": fold, "train_loss": losses, "test_acc": test_acc,
            "n_train": int(len(train_idx)), "n_test": int(len(test_idx))}, model


def run_graph_task(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, jobs: int = 1,
                   return_models: bool = False, only_folds=None):
    """k-fold cross-validation on a list of labelled graphs (``dataset.graphs``).

    ``only_folds`` restricts training to a subset of the folds (smoke runs);
    epoch selection then uses just those folds.
    """
    if model_cfg.task != "graph":
        raise ConfigError("graph task needs a model with task='graph'")
    graphs = list(dataset.graphs)
    labels = np.array([g.label for g in graphs])
    in_dims = {g.feature_dim for g in graphs}
    if len(in_dims) != 1:
        raise ConfigError(f"graphs disagree on feature dim: {sorted(in_dims)}")
    in_dim = in_dims.pop()
    num_classes = int(labels.max()) + 1
    start = time.perf_counter()
    folds = kfold_indices(len(graphs), train_cfg.folds, seed=train_cfg.seed, labels=labels)
    args = [(graphs, tr, te, model_cfg, train_cfg, in_dim, num_classes, f) for f, (tr, te) in enumerate(folds)
            if only_folds is None or f in only_folds]
    results = _map(_train_graph_fold, args, jobs)
    per_fold = [r[0] for r in results]
    acc = np.array([f["test_acc"] for f in per_fold])
    mean_by_epoch = acc.mean(axis=0)
    best = int(np.argmax(mean_by_epoch))
    mean, std = _summary(acc[:, best])
    metrics = Metrics(_config_dict(model_cfg, train_cfg), per_fold, mean, std, best + 1,
                      time.perf_counter() - start)
    return (metrics, [r[1] for r in results]) if return_models else metrics


# ---------------------------------------------------------------------------
# node classification (citation networks, text graphs)
# ---------------------------------------------------------------------------


def _train_node_split(args):
    graph, train, val, test, model_cfg, cfg, num_classes, split = args
    if np.any(train & test) or np.any(train & val) or np.any(val & test):
        raise AssertionError("train/val/test masks overlap")
    seed = cfg.seed + split
    model = Model(model_cfg, graph.feature_dim, num_classes, seed=seed)
    rng = np.random.default_rng(seed)
    state = AdamState()
    train_rows = np.flatnonzero(train)
    losses, val_loss, val_acc, test_acc = [], [], [], []
    for _ in range(cfg.epochs):
        losses.append(train_step(model, state, graph, cfg, rng, rows=train_rows))
        probs = model.predict_proba(graph)
        val_loss.append(cross_entropy(probs, graph.labels, val))
        val_acc.append(accuracy(probs, graph.labels, val))
        test_acc.append(accuracy(probs, graph.labels, test))
    # best validation accuracy; ties go to the lower validation loss
    best = min(range(cfg.epochs), key=lambda e: (-val_acc[e], val_loss[e], e))
    return {"split": split, "train_loss": losses, "val_loss": val_loss, "val_acc": val_acc, "test_acc": test_acc,
            "best_epoch": best + 1, "selected_test_acc": test_acc[best],
            "n_train": int(train.sum()), "n_val": int(val.sum()), "n_test": int(test.sum())}, model


def _node_summary(model_cfg, train_cfg, results, start, return_models):
    per = [r[0] for r in results]
    mean, std = _summary([p["selected_test_acc"] for p in per])
    metrics = Metrics(_config_dict(model_cfg, train_cfg), per, mean, std, None, time.perf_counter() - start)
    return (metrics, [r[1] for r in results]) if return_models else metrics


def run_node_task(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, jobs: int = 1,
                  return_models: bool = False):
    """Repeated stratified train/val/test splits on one graph (``dataset.graph``)."""
    if model_cfg.task != "node":
        raise ConfigError("node task needs a model with task='node'")
    graph: Graph = dataset.graph
    num_classes = int(graph.labels.max()) + 1
    start = time.perf_counter()
    args = []
    for s in range(train_cfg.splits):
        train, val, test = stratified_split(graph.labels, train_cfg.fractions, seed=train_cfg.seed + s)
        args.append((graph, train, val, test, model_cfg, train_cfg, num_classes, s))
    return _node_summary(model_cfg, train_cfg, _map(_train_node_split, args, jobs), start, return_models)


def text_split_masks(dataset, val_fraction: float, seed: int):
    n = dataset.graph.num_nodes
    rng = np.random.default_rng(seed)
    train_docs = rng.permutation(dataset.train_docs)
    n_val = int(round(val_fraction * len(train_docs)))
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    masks[0][train_docs[n_val:]] = True
    masks[1][train_docs[:n_val]] = True
    masks[2][dataset.test_docs] = True
    return masks


def run_text_task(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, jobs: int = 1,
                  return_models: bool = False):
    """Seeded repeated runs on a document/word graph; only documents enter the loss."""
    if model_cfg.task != "node":
        raise ConfigError("text task needs a model with task='node'")
    graph = dataset.graph
    start = time.perf_counter()
    args = []
    for s in range(train_cfg.splits):
        train, val, test = text_split_masks(dataset, train_cfg.val_fraction, train_cfg.seed + s)
        if not val.any() or not train.any():
            raise ConfigError("val_fraction leaves an empty train or validation set")
        args.append((graph, train, val, test, model_cfg, train_cfg, dataset.num_classes, s))
    return _node_summary(model_cfg, train_cfg, _map(_train_node_split, args, jobs), start, return_models)


def _config_dict(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    t = asdict(train_cfg)
    t["fractions"] = list(t["fractions"])
    return {"model": asdict(model_cfg), "train": t}


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def embedding_inputs(dataset):
    """``(data, labels, node_ids)`` covering every node of a dataset or graph.

    For graph-classification datasets all graphs are batched and each node is
    named ``graph:node`` and carries its graph's label.
    """
    if hasattr(dataset, "graphs"):
        batch = GraphBatch.from_graphs(dataset.graphs)
        sizes = np.diff(batch.node_offsets)
        ids = [f"{g}:{v}" for g, n in enumerate(sizes) for v in range(n)]
        return batch, np.repeat(batch.labels, sizes), ids
    graph = dataset.graph if hasattr(dataset, "graph") else dataset
    labels = graph.labels if graph.labels is not None else np.full(graph.num_nodes, -1)
    ids = getattr(dataset, "node_ids", None)
    return graph, labels, list(range(graph.num_nodes)) if ids is None else list(ids)


def export_embeddings(model: Model, dataset, layer_index: int, out_path) -> int:
    """CSV rows ``node_id,label,x_0..x_{d-1}`` of layer ``layer_index`` (1-based) outputs."""
    data, labels, node_ids = embedding_inputs(dataset)
    emb = model.embeddings(data, layer_index)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "label"] + [f"x{j}" for j in range(emb.shape[1])])
        for i in range(emb.shape[0]):
            writer.writerow([node_ids[i], int(labels[i])] + [repr(float(x)) for x in emb[i]])
    return emb.shape[0]
