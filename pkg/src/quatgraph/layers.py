"""QGNN and GCN layers, readout, classification heads and model assembly.

Node states travel as real ``n x 4q`` matrices whose row ``v`` is
``Vec(h_v) = [h_r | h_i | h_j | h_k]``; :func:`to_rows` / :func:`from_rows`
convert to and from :class:`~quatgraph.qalg.QTensor`.

A QGNN layer's weight is a QTensor of shape ``in_q x out_q``.  Node ``v``
receives ``sum_u a_vu (Wᵀ ⊗ h_u)``: the stored matrix is the transpose of the
quaternion map, which keeps the ``H @ W`` orientation of the GCN layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import Tape, softmax
from .graph import CSRMatrix, GraphBatch
from .qalg import DimensionError, QTensor

ARCHS = ("qgnn", "gcn")
TASKS = ("graph", "node")
ACTIVATIONS = ("relu", "identity")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "qgnn"
    task: str = "graph"
    num_layers: int = 1
    hidden: int = 64  # quaternions per node for qgnn, real units for gcn
    activation: str = "relu"
    bias: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.num_layers < 1 or self.hidden < 1:
            raise ConfigError("num_layers and hidden must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


def to_rows(q: QTensor) -> np.ndarray:
    return np.hstack(q.components())


def from_rows(m: np.ndarray) -> QTensor:
    m = np.asarray(m)
    if m.shape[1] % 4:
        raise DimensionError(f"width {m.shape[1]} is not a multiple of 4")
    return QTensor(*np.hsplit(m, 4))


def glorot_init(shape, seed=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniform on ``[-s, s]`` with ``s = sqrt(6 / (fan_in + fan_out))`` for a 2-D ``shape``."""
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = rng if rng is not None else np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class QGNNLayer:
    weight: QTensor
    bias: QTensor | None = None
    activation: str = "relu"


@dataclass(frozen=True)
class GCNLayer:
    weight: np.ndarray
    bias: np.ndarray | None = None
    activation: str = "relu"


@dataclass(frozen=True)
class NodeHead:
    weight: np.ndarray
    bias: np.ndarray | None = None


@dataclass(frozen=True)
class GraphHead:
    weight: np.ndarray
    bias: np.ndarray | None = None


def _activate(tape: Tape, x: int, activation: str) -> int:
    return tape.relu(x) if activation == "relu" else x


def _maybe_bias(tape: Tape, x: int, bias) -> int:
    if bias is None:
        return x
    return tape.add(x, tape.const(np.asarray(bias).reshape(-1)))


# single-layer forward functions --------------------------------------------


def qgnn_forward(layer: QGNNLayer, norm_adj, H: QTensor) -> QTensor:
    w = layer.weight
    if H.cols != w.rows:
        raise DimensionError(f"features have {H.cols} quaternions, layer expects {w.rows}")
    adj = norm_adj if isinstance(norm_adj, CSRMatrix) else CSRMatrix.from_dense(norm_adj)
    if adj.shape != (H.rows, H.rows):
        raise DimensionError(f"adjacency {adj.shape} does not match {H.rows} nodes")
    tape = Tape()
    x = tape.hamilton(tape.const(to_rows(H)), tape.const(w.stack()))
    x = tape.spmm(tape.const(adj), x)
    x = _maybe_bias(tape, x, None if layer.bias is None else to_rows(QTensor(*(c.T for c in layer.bias.components()))))
    return from_rows(tape.value(_activate(tape, x, layer.activation)))


def gcn_forward(layer: GCNLayer, norm_adj, H) -> np.ndarray:
    adj = norm_adj if isinstance(norm_adj, CSRMatrix) else CSRMatrix.from_dense(norm_adj)
    H = H if isinstance(H, CSRMatrix) else np.asarray(H, dtype=np.float64)
    if H.shape[1] != layer.weight.shape[0] or adj.shape[1] != H.shape[0]:
        raise DimensionError(f"shapes adj {adj.shape}, H {H.shape}, W {layer.weight.shape} do not chain")
    tape = Tape()
    x = tape.matmul(tape.const(H), tape.const(layer.weight))
    x = tape.spmm(tape.const(adj), x)
    x = _maybe_bias(tape, x, layer.bias)
    return tape.value(_activate(tape, x, layer.activation))


def node_head_forward(head: NodeHead, norm_adj, X) -> np.ndarray:
    adj = norm_adj if isinstance(norm_adj, CSRMatrix) else CSRMatrix.from_dense(norm_adj)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != head.weight.shape[0] or adj.shape[1] != X.shape[0]:
        raise DimensionError(f"shapes adj {adj.shape}, X {X.shape}, W {head.weight.shape} do not chain")
    tape = Tape()
    x = tape.spmm(tape.const(adj), tape.matmul(tape.const(X), tape.const(head.weight)))
    return softmax(tape.value(_maybe_bias(tape, x, head.bias)))


def concat_readout(per_layer_H) -> QTensor:
    """Per-node quaternion concatenation ``[h^(1); ...; h^(L)]``."""
    per_layer_H = list(per_layer_H)
    if not per_layer_H:
        raise DimensionError("need at least one layer output")
    return QTensor(*(np.hstack([getattr(h, c) for h in per_layer_H]) for c in "rijk"))


def sum_pool(H: QTensor, batch: GraphBatch) -> QTensor:
    if H.rows != batch.num_nodes:
        raise DimensionError(f"{H.rows} node rows for a batch of {batch.num_nodes} nodes")
    tape = Tape()
    return from_rows(tape.value(tape.segment_sum(tape.const(to_rows(H)), batch.node_offsets)))


def graph_head_forward(head: GraphHead, e_G: QTensor) -> np.ndarray:
    """Class probabilities ``softmax(Vec(e_G) W)``, one row per graph."""
    x = to_rows(e_G)
    if x.shape[1] != head.weight.shape[0]:
        raise DimensionError(f"Vec width {x.shape[1]} does not match head input {head.weight.shape[0]}")
    logits = x @ head.weight
    if head.bias is not None:
        logits = logits + head.bias
    return softmax(logits)


# model ----------------------------------------------------------------------


def _tile_components(x):
    """``[x | x | x | x]``: the duplicated input written out as Vec rows."""
    if isinstance(x, CSRMatrix):
        n, d = x.shape
        rows = np.repeat(np.arange(n), np.diff(x.indptr))
        return CSRMatrix.from_coo(np.tile(rows, 4), np.concatenate([x.indices + c * d for c in range(4)]),
                                  np.tile(x.data, 4), (n, 4 * d))
    return np.tile(x, (1, 4))


def _dropout_const(x, rate: float, rng: np.random.Generator):
    if isinstance(x, CSRMatrix):
        keep = (rng.random(x.nnz) >= rate) / (1.0 - rate)
        return CSRMatrix(x.indptr, x.indices, x.data * keep, x.shape)
    return x * ((rng.random(x.shape) >= rate) / (1.0 - rate))


class Model:
    """A stack of QGNN or GCN layers with a graph- or node-level head.

    Graph task: ``num_layers`` conv layers, concat readout over layers 1..L,
    sum pooling, one linear layer.  Node task: ``num_layers`` conv layers then
    a head that aggregates over neighbours before the softmax.
    """

    def __init__(self, config: ModelConfig, in_dim: int, num_classes: int, seed: int = 0,
                 params: dict | None = None):
        self.config = config
        self.in_dim = int(in_dim)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        shapes = self.param_shapes()
        if params is None:
            params = self._init_params(shapes)
        missing = set(shapes) ^ set(params)
        if missing:
            raise ConfigError(f"parameter names differ from the architecture: {sorted(missing)}")
        for name, shape in shapes.items():
            if tuple(np.shape(params[name])) != shape:
                raise ConfigError(f"{name} has shape {np.shape(params[name])}, expected {shape}")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in shapes}

    # structure -------------------------------------------------------------
    @property
    def quaternion(self) -> bool:
        return self.config.arch == "qgnn"

    def layer_dims(self) -> list[tuple[int, int]]:
        h = self.config.hidden
        return [(self.in_dim if l == 0 else h, h) for l in range(self.config.num_layers)]

    def head_in_dim(self) -> int:
        width = 4 * self.config.hidden if self.quaternion else self.config.hidden
        return width * self.config.num_layers if self.config.task == "graph" else width

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for l, (fi, fo) in enumerate(self.layer_dims()):
            shapes[f"layer{l}.weight"] = (4, fi, fo) if self.quaternion else (fi, fo)
            if self.config.bias:
                shapes[f"layer{l}.bias"] = (4 * fo,) if self.quaternion else (fo,)
        shapes["head.weight"] = (self.head_in_dim(), self.num_classes)
        if self.config.bias:
            shapes["head.bias"] = (self.num_classes,)
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def _init_params(self, shapes) -> dict:
        rng = np.random.default_rng(self.seed)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape)
            elif len(shape) == 3:
                params[name] = np.stack([glorot_init(shape[1:], rng=rng) for _ in range(4)])
            else:
                params[name] = glorot_init(shape, rng=rng)
        return params

    def layer(self, l: int):
        w = self.params[f"layer{l}.weight"]
        b = self.params.get(f"layer{l}.bias")
        if self.quaternion:
            bias = None if b is None else QTensor(*(c[:, None] for c in np.split(b, 4)))
            return QGNNLayer(QTensor.from_stack(w), bias, self.config.activation)
        return GCNLayer(w, b, self.config.activation)

    def head(self):
        cls = GraphHead if self.config.task == "graph" else NodeHead
        return cls(self.params["head.weight"], self.params.get("head.bias"))

    # forward ---------------------------------------------------------------
    def forward(self, tape: Tape, data, training: bool = False, rng: np.random.Generator | None = None):
        """Record the forward pass; returns ``(logits_id, [layer output ids])``."""
        cfg = self.config
        drop = cfg.dropout if training else 0.0
        if drop and rng is None:
            raise ConfigError("dropout during training needs an rng")
        adj = tape.const(data.norm_adj)
        feats = data.features
        if feats.shape[1] != self.in_dim:
            raise ConfigError(f"features have dim {feats.shape[1]}, model expects {self.in_dim}")
        # with dropout the quaternion input gets one independent mask per component
        tiled = bool(drop) and self.quaternion
        if drop:
            feats = _dropout_const(_tile_components(feats) if tiled else feats, drop, rng)
        x = tape.const(feats)
        hidden = []
        for l in range(cfg.num_layers):
            w = tape.param(f"layer{l}.weight", self.params[f"layer{l}.weight"])
            if l > 0:
                x = tape.dropout(x, drop, rng) if drop else x
            if self.quaternion:
                h = tape.hamilton_dup(x, w) if l == 0 and not tiled else tape.hamilton(x, w)
            else:
                h = tape.matmul(x, w)
            h = tape.spmm(adj, h)
            if cfg.bias:
                h = tape.add(h, tape.param(f"layer{l}.bias", self.params[f"layer{l}.bias"]))
            x = _activate(tape, h, cfg.activation)
            hidden.append(x)
        head_w = tape.param("head.weight", self.params["head.weight"])
        if cfg.task == "graph":
            e = tape.concat(hidden, groups=4 if self.quaternion else 1)
            e = tape.segment_sum(e, data.node_offsets)
            logits = tape.matmul(e, head_w)
        else:
            z = tape.dropout(x, drop, rng) if drop else x
            logits = tape.spmm(adj, tape.matmul(z, head_w))
        if cfg.bias:
            logits = tape.add(logits, tape.param("head.bias", self.params["head.bias"]))
        return logits, hidden

    def loss(self, data, rows=None, training: bool = False, rng=None):
        """Build a tape with the mean cross-entropy; returns ``(tape, loss_id, logits_id)``."""
        tape = Tape()
        logits, _ = self.forward(tape, data, training, rng)
        labels = data.labels
        loss = tape.softmax_xent(logits, labels, rows)
        return tape, loss, logits

    def predict_proba(self, data) -> np.ndarray:
        tape = Tape()
        logits, _ = self.forward(tape, data)
        return softmax(tape.value(logits))

    def embeddings(self, data, layer_index: int) -> np.ndarray:
        """Real node states after layer ``layer_index`` (1-based); quaternion states come as Vec rows."""
        if not 1 <= layer_index <= self.config.num_layers:
            raise ConfigError(f"layer_index must be in [1, {self.config.num_layers}]")
        tape = Tape()
        _, hidden = self.forward(tape, data)
        return tape.value(hidden[layer_index - 1])

    def copy(self) -> Model:
        return Model(self.config, self.in_dim, self.num_classes, self.seed,
                     {k: v.copy() for k, v in self.params.items()})


def param_count(model: Model) -> int:
    return model.param_count()


# checkpoints ------------------------------------------------------------------
#
# layout: b"QGCKPT01" | uint64 LE header length | UTF-8 JSON header | float64 LE payload
# the header lists arrays (name, shape) in payload order

CHECKPOINT_MAGIC = b"QGCKPT01"


def save_checkpoint(model: Model, path) -> None:
    names = list(model.param_shapes())
    header = {
        "format": "quatgraph-checkpoint",
        "version": 1,
        "config": asdict(model.config),
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "seed": model.seed,
        "arrays": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a quatgraph checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    params = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: payload length does not match header")
    return Model(ModelConfig(**header["config"]), header["in_dim"], header["num_classes"], header["seed"], params)

