"""Graph data model, re-normalized adjacency, degree features and data splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .qalg import DimensionError, DomainError


@dataclass(frozen=True, eq=False)
class CSRMatrix:
    """Minimal immutable CSR matrix; products go through :mod:`quatgraph.kernels`."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: tuple[int, int]

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> CSRMatrix:
        """Build from triplets; duplicate coordinates are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        n_rows, n_cols = shape
        key = rows * n_cols + cols
        order = np.argsort(key, kind="stable")
        key, vals = key[order], vals[order]
        uniq, start = np.unique(key, return_index=True)
        summed = np.add.reduceat(vals, start) if vals.size else vals
        r, c = np.divmod(uniq, n_cols) if n_cols else (uniq, uniq)
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        return cls(np.cumsum(indptr), c.astype(np.int64), summed.astype(np.float64), (int(n_rows), int(n_cols)))

    @classmethod
    def from_dense(cls, dense) -> CSRMatrix:
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_coo(r, c, dense[r, c], dense.shape)

    @classmethod
    def identity(cls, n: int) -> CSRMatrix:
        idx = np.arange(n, dtype=np.int64)
        return cls(np.arange(n + 1, dtype=np.int64), idx, np.ones(n), (n, n))

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.indices] = self.data
        return out

    @cached_property
    def T(self) -> CSRMatrix:
        return CSRMatrix.from_coo(self.indices, self.row_ids(), self.data, (self.shape[1], self.shape[0]))

    def __matmul__(self, dense):
        dense = np.asarray(dense)
        if dense.ndim != 2 or dense.shape[0] != self.shape[1]:
            raise DimensionError(f"cannot multiply sparse {self.shape} by {dense.shape}")
        return kernels.csr_matmul(self.indptr, self.indices, self.data, dense)

    def row_normalized(self) -> CSRMatrix:
        rows = self.row_ids()
        sums = np.bincount(rows, weights=self.data, minlength=self.shape[0])
        sums[sums == 0] = 1.0
        return CSRMatrix(self.indptr, self.indices, self.data / sums[rows], self.shape)


def _clean_edges(edges, num_nodes: int) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise DomainError(f"edge endpoint outside [0, {num_nodes})")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]])
    return np.unique(both, axis=0)


def normalize_adjacency(edges, num_nodes: int, weights=None) -> CSRMatrix:
    """``D^-1/2 (A + I) D^-1/2`` with A symmetrized and deduplicated.

    ``weights`` (optional, aligned with ``edges``) gives a weighted A; the
    self-loop weight stays 1.  Self-loops in ``edges`` are dropped before the
    identity is added.
    """
    if num_nodes <= 0:
        raise DomainError("graph must have at least one node")
    if weights is None:
        und = _clean_edges(edges, num_nodes)
        rows, cols, vals = und[:, 0], und[:, 1], np.ones(len(und))
    else:
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(weights, dtype=np.float64)
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            raise DomainError(f"edge endpoint outside [0, {num_nodes})")
        off = edges[:, 0] != edges[:, 1]
        edges, weights = edges[off], weights[off]
        # symmetric weighted A: keep one weight per unordered pair (max over duplicates)
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        key = lo * num_nodes + hi
        order = np.lexsort((-weights, key))
        key, weights = key[order], weights[order]
        first = np.ones(len(key), dtype=bool)
        first[1:] = key[1:] != key[:-1]
        lo, hi = np.divmod(key[first], num_nodes)
        w = weights[first]
        rows = np.concatenate([lo, hi])
        cols = np.concatenate([hi, lo])
        vals = np.concatenate([w, w])
    loop = np.arange(num_nodes)
    rows = np.concatenate([rows, loop])
    cols = np.concatenate([cols, loop])
    vals = np.concatenate([vals, np.ones(num_nodes)])
    deg = np.bincount(rows, weights=vals, minlength=num_nodes)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return CSRMatrix.from_coo(rows, cols, vals * inv_sqrt[rows] * inv_sqrt[cols], (num_nodes, num_nodes))


def node_degrees(edges, num_nodes: int) -> np.ndarray:
    und = _clean_edges(edges, num_nodes)
    return np.bincount(und[:, 0], minlength=num_nodes)


def degree_onehot_features(edges, num_nodes: int, max_degree: int) -> np.ndarray:
    deg = node_degrees(edges, num_nodes)
    if deg.size and deg.max() > max_degree:
        raise DomainError(f"degree {deg.max()} exceeds max_degree={max_degree}")
    out = np.zeros((num_nodes, max_degree + 1))
    out[np.arange(num_nodes), deg] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class Graph:
    """One graph.  ``label`` is set for graph-level tasks, ``labels`` for node tasks.

    ``features`` may be dense or a :class:`CSRMatrix`.
    """

    num_nodes: int
    edges: np.ndarray
    features: object
    label: int | None = None
    labels: np.ndarray | None = None
    edge_weights: np.ndarray | None = None
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= self.num_nodes):
            raise DomainError("edge endpoint outside node range")
        object.__setattr__(self, "edges", edges)
        if self.features.shape[0] != self.num_nodes:
            raise DimensionError(f"{self.features.shape[0]} feature rows for {self.num_nodes} nodes")
        names = list(self.masks)
        for a in range(len(names)):
            for b in range(a + 1, len(names)):
                if np.any(self.masks[names[a]] & self.masks[names[b]]):
                    raise DomainError(f"masks {names[a]!r} and {names[b]!r} overlap")

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @cached_property
    def norm_adj(self) -> CSRMatrix:
        return normalize_adjacency(self.edges, self.num_nodes, self.edge_weights)

    def with_masks(self, **masks) -> Graph:
        return Graph(self.num_nodes, self.edges, self.features, self.label, self.labels, self.edge_weights,
                     {k: np.asarray(v, dtype=bool) for k, v in masks.items()})


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of graphs; node block ``g`` is ``node_offsets[g]:node_offsets[g+1]``."""

    graphs: tuple
    node_offsets: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_graphs(cls, graphs) -> GraphBatch:
        graphs = tuple(graphs)
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        labels = np.array([-1 if g.label is None else g.label for g in graphs], dtype=np.int64)
        return cls(graphs, offsets, labels)

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return int(self.node_offsets[-1])

    @cached_property
    def norm_adj(self) -> CSRMatrix:
        parts = [g.norm_adj for g in self.graphs]
        rows = np.concatenate([p.row_ids() + o for p, o in zip(parts, self.node_offsets)])
        cols = np.concatenate([p.indices + o for p, o in zip(parts, self.node_offsets)])
        vals = np.concatenate([p.data for p in parts])
        n = self.num_nodes
        return CSRMatrix.from_coo(rows, cols, vals, (n, n))

    @cached_property
    def features(self) -> np.ndarray:
        return np.vstack([np.asarray(g.features.todense() if isinstance(g.features, CSRMatrix) else g.features)
                          for g in self.graphs])


def stratified_split(labels, fractions=(0.6, 0.2, 0.2), seed: int = 0, min_class_size: int = 5):
    """Per-class shuffled split into ``(train, val, test)`` boolean masks.

    Each class is cut at ``round(cumulative fraction * class size)``, so every
    part is within one node of its target.  Nodes with negative labels are
    left out of all masks.
    """
    labels = np.asarray(labels)
    if not np.isclose(sum(fractions), 1.0):
        raise DomainError(f"fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    masks = [np.zeros(labels.shape[0], dtype=bool) for _ in fractions]
    bounds = np.cumsum((0.0,) + tuple(fractions))
    for cls in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == cls)
        if members.size < min_class_size:
            raise DomainError(f"class {cls} has {members.size} members (< {min_class_size})")
        members = rng.permutation(members)
        cuts = np.round(bounds * members.size).astype(int)
        for m, lo, hi in zip(masks, cuts[:-1], cuts[1:]):
            m[members[lo:hi]] = True
    return tuple(masks)


def kfold_indices(num_graphs: int, k: int = 10, seed: int = 0, labels=None):
    """``k`` (train_idx, test_idx) pairs whose test parts partition ``range(num_graphs)``.

    With ``labels``, folds are stratified: each class is shuffled and dealt
    round-robin, continuing where the previous class stopped, so fold sizes
    still differ by at most one.
    """
    if k < 2 or k > num_graphs:
        raise DomainError(f"need 2 <= k <= num_graphs, got k={k}, num_graphs={num_graphs}")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = rng.permutation(num_graphs)
    else:
        labels = np.asarray(labels)
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    fold_of = np.empty(num_graphs, dtype=np.int64)
    fold_of[order] = np.arange(num_graphs) % k
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, test))
    return folds
