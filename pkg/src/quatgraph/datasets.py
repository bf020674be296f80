"""Loaders for TU graph collections, citation networks and text corpora.

File formats
------------
TU (``DS`` is the dataset name, all indices 1-based):
    ``DS_A.txt``              ``u, v`` per line, global node ids
    ``DS_graph_indicator.txt`` graph id of node ``n`` on line ``n``
    ``DS_graph_labels.txt``   one label per graph
    ``DS_node_labels.txt``    optional, one integer per node
    ``DS_node_attributes.txt`` optional, comma-separated floats per node

Citation (directory with two files):
    ``nodes.tsv``  ``id<TAB>label<TAB>j:v j:v ...`` (0-based sparse feature
                   pairs, may be empty).  An optional first line
                   ``# num_features=D`` fixes the feature width.
    ``edges.tsv``  ``id<TAB>id`` per line, ids as in ``nodes.tsv``

Text corpus:
    corpus file  ``label<TAB>token token ...`` one document per line
    split file   ``doc_index<TAB>train|test`` one line per document
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .graph import CSRMatrix, Graph, degree_onehot_features, node_degrees
from .qalg import DomainError, QTensor

FEATURE_MODES = ("auto", "node_labels_onehot", "node_attributes", "degree_onehot")


class FormatError(ValueError):
    """Malformed dataset file."""


# ---------------------------------------------------------------------------
# TU graph collections
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TUDataset:
    name: str
    graphs: list
    labels: np.ndarray
    feature_mode: str
    label_values: np.ndarray
    node_label_values: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return int(self.label_values.shape[0])

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].feature_dim

    def __len__(self):
        return len(self.graphs)


def _read_ints(path: Path, lineno_base: int = 1) -> np.ndarray:
    values = []
    with open(path) as fh:
        for n, line in enumerate(fh, lineno_base):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(int(float(line.split(",")[0])))
            except ValueError as exc:
                raise FormatError(f"{path}:{n}: expected an integer, got {line!r}") from exc
    return np.array(values, dtype=np.int64)


def _tu_prefix(dir_path: Path, name: str | None) -> tuple[str, Path]:
    if name is None:
        hits = sorted(dir_path.glob("*_A.txt"))
        if not hits:
            raise FileNotFoundError(f"no *_A.txt file in {dir_path}")
        name = hits[0].name[: -len("_A.txt")]
    return name, dir_path / name


def load_tu(dir_path, feature_mode: str = "auto", name: str | None = None,
            max_degree: int | None = None) -> TUDataset:
    """Read a TU-format directory.

    ``auto`` picks node labels when present, else node attributes, else degree
    one-hots.  For degree features ``max_degree`` defaults to the maximum
    degree over the whole collection.
    """
    if feature_mode not in FEATURE_MODES:
        raise DomainError(f"feature_mode must be one of {FEATURE_MODES}")
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise FileNotFoundError(f"dataset directory {dir_path} does not exist")
    name, prefix = _tu_prefix(dir_path, name)
    for suffix in ("_A.txt", "_graph_indicator.txt", "_graph_labels.txt"):
        if not Path(f"{prefix}{suffix}").exists():
            raise FileNotFoundError(f"missing mandatory file {prefix}{suffix}")

    indicator = _read_ints(Path(f"{prefix}_graph_indicator.txt"))
    graph_labels_raw = _read_ints(Path(f"{prefix}_graph_labels.txt"))
    num_nodes_total = indicator.shape[0]
    num_graphs = graph_labels_raw.shape[0]
    if indicator.size and (indicator.min() < 1 or indicator.max() > num_graphs):
        raise FormatError(f"{prefix}_graph_indicator.txt: graph id outside [1, {num_graphs}]")
    if np.any(np.diff(indicator) < 0):
        raise FormatError(f"{prefix}_graph_indicator.txt: nodes are not grouped by graph")

    edges = []
    a_path = Path(f"{prefix}_A.txt")
    with open(a_path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                u, v = (int(t) for t in line.replace(",", " ").split())
            except ValueError as exc:
                raise FormatError(f"{a_path}:{n}: expected 'u, v', got {line.strip()!r}") from exc
            if not (1 <= u <= num_nodes_total and 1 <= v <= num_nodes_total):
                raise FormatError(f"{a_path}:{n}: node id outside [1, {num_nodes_total}]")
            edges.append((u - 1, v - 1))
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)

    graph_of_node = indicator - 1
    if np.any(graph_of_node[edges[:, 0]] != graph_of_node[edges[:, 1]]):
        raise FormatError(f"{a_path}: edge joins nodes of different graphs")
    offsets = np.concatenate([[0], np.cumsum(np.bincount(graph_of_node, minlength=num_graphs))])
    if np.any(np.diff(offsets) == 0):
        raise FormatError(f"{prefix}: a graph has no nodes")

    node_labels_path = Path(f"{prefix}_node_labels.txt")
    attrs_path = Path(f"{prefix}_node_attributes.txt")
    if feature_mode == "auto":
        feature_mode = ("node_labels_onehot" if node_labels_path.exists()
                        else "node_attributes" if attrs_path.exists() else "degree_onehot")

    node_label_values = None
    if feature_mode == "node_labels_onehot":
        if not node_labels_path.exists():
            raise FileNotFoundError(f"feature_mode node_labels_onehot needs {node_labels_path}")
        node_labels = _read_ints(node_labels_path)
        if node_labels.shape[0] != num_nodes_total:
            raise FormatError(f"{node_labels_path}: {node_labels.shape[0]} labels for {num_nodes_total} nodes")
        node_label_values, idx = np.unique(node_labels, return_inverse=True)
        all_feats = np.zeros((num_nodes_total, node_label_values.shape[0]))
        all_feats[np.arange(num_nodes_total), idx] = 1.0
    elif feature_mode == "node_attributes":
        if not attrs_path.exists():
            raise FileNotFoundError(f"feature_mode node_attributes needs {attrs_path}")
        all_feats = np.loadtxt(attrs_path, delimiter=",", ndmin=2)
        if all_feats.shape[0] != num_nodes_total:
            raise FormatError(f"{attrs_path}: {all_feats.shape[0]} rows for {num_nodes_total} nodes")
    else:
        all_feats = None

    label_values, graph_labels = np.unique(graph_labels_raw, return_inverse=True)
    per_graph_edges = []
    for g in range(num_graphs):
        lo, hi = offsets[g], offsets[g + 1]
        sel = (edges[:, 0] >= lo) & (edges[:, 0] < hi)
        per_graph_edges.append(edges[sel] - lo)

    if feature_mode == "degree_onehot" and max_degree is None:
        max_degree = max(int(node_degrees(e, hi - lo).max(initial=0))
                         for e, lo, hi in zip(per_graph_edges, offsets[:-1], offsets[1:]))

    graphs = []
    for g in range(num_graphs):
        lo, hi = int(offsets[g]), int(offsets[g + 1])
        if all_feats is None:
            feats = degree_onehot_features(per_graph_edges[g], hi - lo, max_degree)
        else:
            feats = all_feats[lo:hi]
        graphs.append(Graph(hi - lo, per_graph_edges[g], feats, label=int(graph_labels[g])))
    return TUDataset(name, graphs, graph_labels.astype(np.int64), feature_mode, label_values, node_label_values)


def write_tu(dataset: TUDataset, dir_path, name: str | None = None) -> Path:
    """Write ``dataset`` back in TU layout (node labels / attributes as its features allow)."""
    name = name or dataset.name
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    prefix = dir_path / name
    offset = 0
    with open(f"{prefix}_A.txt", "w") as fa, open(f"{prefix}_graph_indicator.txt", "w") as fi:
        for gid, g in enumerate(dataset.graphs, 1):
            for u, v in g.edges:
                fa.write(f"{u + 1 + offset}, {v + 1 + offset}\n")
            fi.write(f"{gid}\n" * g.num_nodes)
            offset += g.num_nodes
    with open(f"{prefix}_graph_labels.txt", "w") as fl:
        for lab in dataset.labels:
            fl.write(f"{dataset.label_values[lab]}\n")
    if dataset.feature_mode == "node_labels_onehot":
        with open(f"{prefix}_node_labels.txt", "w") as fn:
            for g in dataset.graphs:
                for row in np.asarray(g.features):
                    fn.write(f"{dataset.node_label_values[int(np.argmax(row))]}\n")
    elif dataset.feature_mode == "node_attributes":
        with open(f"{prefix}_node_attributes.txt", "w") as fn:
            for g in dataset.graphs:
                for row in np.asarray(g.features):
                    fn.write(", ".join(repr(float(x)) for x in row) + "\n")
    return dir_path


# ---------------------------------------------------------------------------
# citation networks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CitationDataset:
    graph: Graph
    num_classes: int
    class_names: list
    node_ids: list
    num_edges_raw: int

    @property
    def feature_dim(self) -> int:
        return self.graph.feature_dim


def load_citation(dir_path, normalize_features: bool = True) -> CitationDataset:
    """Read ``nodes.tsv`` / ``edges.tsv``; labels are indices into sorted class names."""
    dir_path = Path(dir_path)
    nodes_path, edges_path = dir_path / "nodes.tsv", dir_path / "edges.tsv"
    for p in (nodes_path, edges_path):
        if not p.exists():
            raise FileNotFoundError(f"missing {p}")

    declared_dim = None
    ids, raw_labels, rows, cols, vals = [], [], [], [], []
    with open(nodes_path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, value = tok.partition("=")
                    if key == "num_features":
                        declared_dim = int(value)
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise FormatError(f"{nodes_path}:{n}: expected 'id<TAB>label<TAB>features'")
            r = len(ids)
            ids.append(parts[0])
            raw_labels.append(parts[1])
            for tok in (parts[2].split() if len(parts) == 3 else []):
                j, sep, v = tok.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    cols.append(int(j))
                    vals.append(float(v))
                except ValueError as exc:
                    raise FormatError(f"{nodes_path}:{n}: bad feature entry {tok!r}") from exc
                rows.append(r)
    if not ids:
        raise FormatError(f"{nodes_path}: no nodes")
    index = {node_id: i for i, node_id in enumerate(ids)}
    if len(index) != len(ids):
        raise FormatError(f"{nodes_path}: duplicate node ids")

    edges = []
    with open(edges_path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{edges_path}:{n}: expected two node ids")
            try:
                edges.append((index[parts[0]], index[parts[1]]))
            except KeyError as exc:
                raise FormatError(f"{edges_path}:{n}: unknown node id {exc.args[0]!r}") from exc

    dim = declared_dim if declared_dim is not None else (max(cols) + 1 if cols else 0)
    if cols and max(cols) >= dim:
        raise FormatError(f"{nodes_path}: feature index {max(cols)} >= num_features={dim}")
    feats = CSRMatrix.from_coo(rows, cols, vals, (len(ids), dim))
    if normalize_features:
        feats = feats.row_normalized()
    class_names = sorted(set(raw_labels))
    labels = np.array([class_names.index(l) for l in raw_labels], dtype=np.int64)
    graph = Graph(len(ids), np.array(edges, dtype=np.int64).reshape(-1, 2), feats, labels=labels)
    return CitationDataset(graph, len(class_names), class_names, ids, len(edges))


def write_citation(dir_path, node_ids, labels, features, edges) -> Path:
    """Write the portable citation layout; ``features`` dense or :class:`CSRMatrix`."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    feats = features if isinstance(features, CSRMatrix) else CSRMatrix.from_dense(features)
    with open(dir_path / "nodes.tsv", "w") as fh:
        fh.write(f"# num_features={feats.shape[1]}\n")
        for r, (node_id, lab) in enumerate(zip(node_ids, labels)):
            lo, hi = feats.indptr[r], feats.indptr[r + 1]
            pairs = " ".join(f"{j}:{float(v)!r}" for j, v in zip(feats.indices[lo:hi], feats.data[lo:hi]))
            fh.write(f"{node_id}\t{lab}\t{pairs}\n")
    with open(dir_path / "edges.tsv", "w") as fh:
        for u, v in edges:
            fh.write(f"{u}\t{v}\n")
    return dir_path


# ---------------------------------------------------------------------------
# text corpora as one heterogeneous graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TextGraphDataset:
    """Documents occupy node ids ``0..n_docs-1``, vocabulary words follow."""

    graph: Graph
    doc_mask: np.ndarray
    word_mask: np.ndarray
    train_docs: np.ndarray
    test_docs: np.ndarray
    vocab: list
    class_names: list

    @property
    def num_docs(self) -> int:
        return int(self.doc_mask.sum())

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_dim(self) -> int:
        return self.graph.feature_dim


def pmi_edges(docs_tokens, vocab_index, window: int = 20):
    """Positive-PMI word pairs over sliding windows.

    Returns ``(a, b, pmi)`` with ``a < b`` word indices and
    ``pmi = log(#W(a,b) * #W / (#W(a) * #W(b)))`` kept only where positive.
    """
    flat = [vocab_index[t] for doc in docs_tokens for t in doc]
    offsets = np.concatenate([[0], np.cumsum([len(d) for d in docs_tokens])])
    n_windows, word_windows, a, b, both = kernels.window_counts(
        np.array(flat, dtype=np.int64), offsets, window, len(vocab_index))
    if a.size == 0:
        return a, b, np.zeros(0)
    pmi = np.log(both * float(n_windows) / (word_windows[a] * word_windows[b]).astype(np.float64))
    keep = pmi > 0
    return a[keep], b[keep], pmi[keep]


def tfidf_edges(docs_tokens, vocab_index):
    """Document-word weights ``count(w, d) * log(n_docs / df(w))``; zero weights are dropped."""
    n_docs = len(docs_tokens)
    df = np.zeros(len(vocab_index), dtype=np.int64)
    counts = []
    for doc in docs_tokens:
        c: dict[int, int] = {}
        for t in doc:
            w = vocab_index[t]
            c[w] = c.get(w, 0) + 1
        counts.append(c)
        for w in c:
            df[w] += 1
    d_idx, w_idx, weight = [], [], []
    for d, c in enumerate(counts):
        for w in sorted(c):
            val = c[w] * math.log(n_docs / df[w])
            if val > 0:
                d_idx.append(d)
                w_idx.append(w)
                weight.append(val)
    return np.array(d_idx, dtype=np.int64), np.array(w_idx, dtype=np.int64), np.array(weight)


def build_text_graph(corpus, train_docs=None, test_docs=None, window: int = 20) -> TextGraphDataset:
    """Heterogeneous doc/word graph with TF-IDF and positive-PMI edge weights.

    ``corpus`` is a sequence of ``(label, tokens)``.  Features are the identity.
    """
    corpus = list(corpus)
    docs_tokens = [list(tokens) for _, tokens in corpus]
    vocab = sorted({t for doc in docs_tokens for t in doc})
    if not vocab:
        raise DomainError("corpus has an empty vocabulary")
    vocab_index = {t: i for i, t in enumerate(vocab)}
    n_docs, n_words = len(docs_tokens), len(vocab)
    n = n_docs + n_words

    wa, wb, pmi = pmi_edges(docs_tokens, vocab_index, window)
    dd, dw, tfidf = tfidf_edges(docs_tokens, vocab_index)
    edges = np.concatenate([np.stack([wa + n_docs, wb + n_docs], axis=1),
                            np.stack([dd, dw + n_docs], axis=1)]).reshape(-1, 2)
    weights = np.concatenate([pmi, tfidf])

    class_names = sorted({str(lab) for lab, _ in corpus})
    labels = np.full(n, -1, dtype=np.int64)
    labels[:n_docs] = [class_names.index(str(lab)) for lab, _ in corpus]
    doc_mask = np.zeros(n, dtype=bool)
    doc_mask[:n_docs] = True
    train_docs = np.arange(n_docs) if train_docs is None else np.asarray(train_docs, dtype=np.int64)
    test_docs = np.setdiff1d(np.arange(n_docs), train_docs) if test_docs is None else np.asarray(test_docs, dtype=np.int64)
    if np.intersect1d(train_docs, test_docs).size:
        raise DomainError("train and test documents overlap")
    graph = Graph(n, edges, CSRMatrix.identity(n), labels=labels, edge_weights=weights)
    return TextGraphDataset(graph, doc_mask, ~doc_mask, train_docs, test_docs, vocab, class_names)


def load_corpus(corpus_path, split_path):
    """Read a pre-tokenized corpus and its split file; returns ``(corpus, train, test)``."""
    corpus = []
    with open(corpus_path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise FormatError(f"{corpus_path}:{n}: expected 'label<TAB>tokens'")
            corpus.append((label, text.split()))
    train, test = [], []
    with open(split_path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("train", "test") or not parts[0].isdigit():
                raise FormatError(f"{split_path}:{n}: expected 'doc_index<TAB>train|test'")
            idx = int(parts[0])
            if not 0 <= idx < len(corpus):
                raise FormatError(f"{split_path}:{n}: document index {idx} out of range")
            (train if parts[1] == "train" else test).append(idx)
    return corpus, np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)


def load_text(dir_path, window: int = 20) -> TextGraphDataset:
    """Directory form: ``corpus.txt`` and ``split.txt``."""
    dir_path = Path(dir_path)
    corpus, train, test = load_corpus(dir_path / "corpus.txt", dir_path / "split.txt")
    return build_text_graph(corpus, train, test, window=window)


def duplicate_features(features) -> QTensor:
    """Quaternion features with all four components equal to ``features``."""
    f = features.todense() if isinstance(features, CSRMatrix) else np.asarray(features, dtype=np.float64)
    return QTensor(f, f, f, f)
