"""Reverse-mode differentiation over the small, fixed op vocabulary the models use.

A :class:`Tape` records each op with its inputs, attributes and output value.
``backward`` walks the record in reverse and returns a :class:`GradStore`
keyed by parameter name.  ``Tape.replay`` recomputes the forward pass from the
recorded ops (optionally with substituted parameter values), which is what the
finite-difference checker uses.

Quaternion activations live in real matrices whose columns are laid out
component-major, ``[r | i | j | k]``, so a row is ``Vec`` of that node's
quaternion vector.  Hamilton weights are arrays of shape ``(4, in_q, out_q)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import CSRMatrix
from .kernels import segment_sum
from .qalg import HAMILTON_TABLE


class ContractError(ValueError):
    """A caller violated an op's precondition (e.g. non-scalar loss)."""


class UnsupportedOpError(TypeError):
    """The tape holds an op the gradient engine does not know."""


class NonFiniteError(FloatingPointError):
    """A NaN or inf showed up where training cannot continue."""


def hamilton_rows_matrix(w: np.ndarray) -> np.ndarray:
    """Real ``(4 in) x (4 out)`` matrix ``B`` with ``Vec(W ⊗ h)ᵀ = Vec(h)ᵀ B``.

    ``w[c]`` is the ``in x out`` component ``c`` of the (transposed) weight,
    i.e. the quaternion map applied to each node is ``w`` read as ``out x in``.
    """
    _, n_in, n_out = w.shape
    out = np.empty((4 * n_in, 4 * n_out))
    for b, row in enumerate(HAMILTON_TABLE):
        for a, (sign, comp) in enumerate(row):
            out[a * n_in:(a + 1) * n_in, b * n_out:(b + 1) * n_out] = sign * w[comp]
    return out


def _fold_hamilton_grad(d_block: np.ndarray, n_in: int, n_out: int) -> np.ndarray:
    grad = np.zeros((4, n_in, n_out))
    for b, row in enumerate(HAMILTON_TABLE):
        for a, (sign, comp) in enumerate(row):
            grad[comp] += sign * d_block[a * n_in:(a + 1) * n_in, b * n_out:(b + 1) * n_out]
    return grad


def duplicated_input_matrix(w: np.ndarray) -> np.ndarray:
    """``C`` with ``[x x x x] @ hamilton_rows_matrix(w) == x @ C``."""
    _, n_in, n_out = w.shape
    out = np.zeros((n_in, 4 * n_out))
    for b, row in enumerate(HAMILTON_TABLE):
        for sign, comp in row:
            out[:, b * n_out:(b + 1) * n_out] += sign * w[comp]
    return out


def _fold_duplicated_grad(d_c: np.ndarray, n_out: int) -> np.ndarray:
    n_in = d_c.shape[0]
    grad = np.zeros((4, n_in, n_out))
    for b, row in enumerate(HAMILTON_TABLE):
        block = d_c[:, b * n_out:(b + 1) * n_out]
        for sign, comp in row:
            grad[comp] += sign * block
    return grad


def _left_matmul(a, b):
    return a @ b


def _left_matmul_t(a, g):
    return a.T @ g


def _concat_perm(widths, groups):
    """Column order turning plain concatenation into per-component concatenation."""
    starts = np.concatenate([[0], np.cumsum(widths)])
    cols = []
    for c in range(groups):
        for s, w in zip(starts[:-1], widths):
            q = w // groups
            cols.append(np.arange(s + c * q, s + (c + 1) * q))
    return np.concatenate(cols)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


# forward(values, attrs) -> output ; backward(grad_out, values, output, attrs) -> per-input grads

def _fw_matmul(v, at):
    return _left_matmul(v[0], v[1])


def _bw_matmul(g, v, out, at):
    a, b = v
    ga = None if isinstance(a, CSRMatrix) else g @ b.T
    return [ga, _left_matmul_t(a, g)]


def _fw_spmm(v, at):
    if not isinstance(v[0], CSRMatrix):
        raise ContractError("spmm expects a sparse left operand")
    return v[0] @ v[1]


def _bw_spmm(g, v, out, at):
    return [None, v[0].T @ g]


def _fw_hamilton(v, at):
    return _left_matmul(v[0], hamilton_rows_matrix(v[1]))


def _bw_hamilton(g, v, out, at):
    h, w = v
    gh = None if isinstance(h, CSRMatrix) else g @ hamilton_rows_matrix(w).T
    return [gh, _fold_hamilton_grad(_left_matmul_t(h, g), w.shape[1], w.shape[2])]


def _fw_hamilton_dup(v, at):
    return _left_matmul(v[0], duplicated_input_matrix(v[1]))


def _bw_hamilton_dup(g, v, out, at):
    x, w = v
    gx = None if isinstance(x, CSRMatrix) else g @ duplicated_input_matrix(w).T
    return [gx, _fold_duplicated_grad(_left_matmul_t(x, g), w.shape[2])]


def _fw_add(v, at):
    return v[0] + v[1]


def _bw_add(g, v, out, at):
    gb = g
    if np.ndim(v[1]) < g.ndim or v[1].shape != g.shape:
        gb = g.sum(axis=0).reshape(np.shape(v[1]))
    return [g, gb]


def _fw_relu(v, at):
    return np.maximum(v[0], 0.0)


def _bw_relu(g, v, out, at):
    return [g * (v[0] > 0.0)]


def _fw_mul_mask(v, at):
    return v[0] * at["mask"]


def _bw_mul_mask(g, v, out, at):
    return [g * at["mask"]]


def _fw_concat(v, at):
    out = np.concatenate(v, axis=1)
    if at["groups"] > 1:
        out = out[:, at["perm"]]
    return out


def _bw_concat(g, v, out, at):
    if at["groups"] > 1:
        full = np.empty_like(g)
        full[:, at["perm"]] = g
        g = full
    splits = np.cumsum([x.shape[1] for x in v])[:-1]
    return list(np.split(g, splits, axis=1))


def _fw_segment_sum(v, at):
    return segment_sum(v[0], at["offsets"])


def _bw_segment_sum(g, v, out, at):
    sizes = np.diff(at["offsets"])
    return [np.repeat(g, sizes, axis=0)]


def _fw_xent(v, at):
    logits = v[0]
    rows = at["rows"]
    if rows.size == 0:
        raise ContractError("cross-entropy over an empty row set")
    logp = log_softmax(logits[rows])
    return np.array(-logp[np.arange(rows.size), at["labels"]].mean())


def _bw_xent(g, v, out, at):
    logits = v[0]
    rows = at["rows"]
    p = softmax(logits[rows])
    p[np.arange(rows.size), at["labels"]] -= 1.0
    grad = np.zeros_like(logits)
    np.add.at(grad, rows, p * (float(g) / rows.size))
    return [grad]


OPS = {
    "matmul": (_fw_matmul, _bw_matmul),
    "spmm": (_fw_spmm, _bw_spmm),
    "hamilton": (_fw_hamilton, _bw_hamilton),
    "hamilton_dup": (_fw_hamilton_dup, _bw_hamilton_dup),
    "add": (_fw_add, _bw_add),
    "relu": (_fw_relu, _bw_relu),
    "mul_mask": (_fw_mul_mask, _bw_mul_mask),
    "concat": (_fw_concat, _bw_concat),
    "segment_sum": (_fw_segment_sum, _bw_segment_sum),
    "softmax_xent": (_fw_xent, _bw_xent),
}


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: int
    attrs: dict = field(default_factory=dict)


class GradStore(dict):
    """Parameter name -> gradient.  A missing name means a zero gradient."""

    def get_or_zeros(self, name: str, like: np.ndarray) -> np.ndarray:
        return self[name] if name in self else np.zeros_like(like)


class Tape:
    """Recorded forward computation.  Ids are indices into ``values``."""

    def __init__(self):
        self.values: list = []
        self.nodes: list[Node] = []
        self.param_ids: dict[str, int] = {}
        self._requires_grad: list[bool] = []
        self._leaf_kind: list[str | None] = []

    # leaves ---------------------------------------------------------------
    def _leaf(self, value, requires_grad: bool, kind: str) -> int:
        self.values.append(value)
        self._requires_grad.append(requires_grad)
        self._leaf_kind.append(kind)
        return len(self.values) - 1

    def param(self, name: str, value: np.ndarray) -> int:
        if name in self.param_ids:
            return self.param_ids[name]
        tid = self._leaf(np.asarray(value, dtype=np.float64), True, "param")
        self.param_ids[name] = tid
        return tid

    def const(self, value) -> int:
        if not isinstance(value, CSRMatrix):
            value = np.asarray(value, dtype=np.float64)
        return self._leaf(value, False, "const")

    def value(self, tid: int):
        return self.values[tid]

    # ops ------------------------------------------------------------------
    def record(self, kind: str, inputs, value=None, **attrs) -> int:
        """Append an op.  Unknown kinds need an explicit ``value`` and cannot be differentiated."""
        inputs = tuple(inputs)
        if kind in OPS:
            value = OPS[kind][0]([self.values[i] for i in inputs], attrs)
        elif value is None:
            raise UnsupportedOpError(f"unknown op {kind!r}")
        self.values.append(value)
        self._requires_grad.append(any(self._requires_grad[i] for i in inputs))
        self._leaf_kind.append(None)
        out = len(self.values) - 1
        self.nodes.append(Node(kind, inputs, out, attrs))
        return out

    def matmul(self, a: int, b: int) -> int:
        return self.record("matmul", (a, b))

    def spmm(self, adj: int, x: int) -> int:
        return self.record("spmm", (adj, x))

    def hamilton(self, h: int, w: int) -> int:
        return self.record("hamilton", (h, w))

    def hamilton_dup(self, x: int, w: int) -> int:
        return self.record("hamilton_dup", (x, w))

    def add(self, a: int, b: int) -> int:
        return self.record("add", (a, b))

    def relu(self, a: int) -> int:
        return self.record("relu", (a,))

    def dropout(self, a: int, rate: float, rng: np.random.Generator) -> int:
        if rate <= 0.0:
            return a
        shape = np.shape(self.values[a])
        mask = (rng.random(shape) >= rate) / (1.0 - rate)
        return self.record("mul_mask", (a,), mask=mask)

    def concat(self, ids, groups: int = 1) -> int:
        ids = tuple(ids)
        widths = [self.values[i].shape[1] for i in ids]
        if any(w % groups for w in widths):
            raise ContractError(f"widths {widths} not divisible into {groups} component groups")
        perm = _concat_perm(widths, groups) if groups > 1 else None
        return self.record("concat", ids, groups=groups, perm=perm)

    def segment_sum(self, a: int, offsets) -> int:
        return self.record("segment_sum", (a,), offsets=np.asarray(offsets, dtype=np.int64))

    def softmax_xent(self, logits: int, labels, rows=None) -> int:
        labels = np.asarray(labels, dtype=np.int64)
        n = self.values[logits].shape[0]
        if rows is None:
            rows = np.arange(n)
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        if labels.shape[0] == n and rows.shape[0] != n:
            labels = labels[rows]
        return self.record("softmax_xent", (logits,), rows=rows.astype(np.int64), labels=labels)

    # replay ---------------------------------------------------------------
    def replay(self, overrides: dict | None = None) -> list:
        """Recompute every value; ``overrides`` maps parameter names to new arrays."""
        values = list(self.values)
        for name, arr in (overrides or {}).items():
            values[self.param_ids[name]] = np.asarray(arr, dtype=np.float64)
        for node in self.nodes:
            if node.kind not in OPS:
                raise UnsupportedOpError(f"cannot replay op {node.kind!r}")
            values[node.output] = OPS[node.kind][0]([values[i] for i in node.inputs], node.attrs)
        return values


def backward(tape: Tape, loss_id: int) -> GradStore:
    loss = tape.values[loss_id]
    if np.ndim(loss) != 0 and np.size(loss) != 1:
        raise ContractError(f"loss must be scalar, got shape {np.shape(loss)}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(np.asarray(loss, dtype=np.float64))}
    for node in reversed(tape.nodes):
        if node.output > loss_id or node.output not in grads:
            continue
        if not tape._requires_grad[node.output]:
            continue
        if node.kind not in OPS:
            raise UnsupportedOpError(f"no gradient rule for op {node.kind!r}")
        g = grads.pop(node.output)
        in_vals = [tape.values[i] for i in node.inputs]
        in_grads = OPS[node.kind][1](g, in_vals, tape.values[node.output], node.attrs)
        for tid, gi in zip(node.inputs, in_grads):
            if gi is None or not tape._requires_grad[tid]:
                continue
            grads[tid] = grads[tid] + gi if tid in grads else gi
    store = GradStore()
    for name, tid in tape.param_ids.items():
        if tid in grads:
            store[name] = grads[tid]
    return store


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple | None
    epsilon: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def check_tape_gradients(tape: Tape, loss_id: int, epsilon: float = 1e-5, n_samples: int = 100,
                         seed: int = 0) -> GradCheckReport:
    """Compare ``backward`` against central differences on sampled parameter entries.

    At least ``n_samples`` scalars are checked (all of them if there are fewer).
    """
    grads = backward(tape, loss_id)
    names = sorted(tape.param_ids)
    sizes = [tape.values[tape.param_ids[n]].size for n in names]
    total = int(sum(sizes))
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if total <= n_samples else np.sort(rng.choice(total, size=n_samples, replace=False))
    starts = np.concatenate([[0], np.cumsum(sizes)])
    worst, max_err = None, 0.0
    for f in flat:
        p = int(np.searchsorted(starts, f, side="right") - 1)
        name = names[p]
        base = tape.values[tape.param_ids[name]]
        idx = np.unravel_index(int(f - starts[p]), base.shape)
        plus = base.copy()
        plus[idx] += epsilon
        minus = base.copy()
        minus[idx] -= epsilon
        f_plus = float(tape.replay({name: plus})[loss_id])
        f_minus = float(tape.replay({name: minus})[loss_id])
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        analytic = float(grads.get_or_zeros(name, base)[idx])
        err = float(relative_error(analytic, numeric))
        if worst is None or err > max_err:
            max_err, worst = err, (name, tuple(int(i) for i in idx), analytic, numeric)
    return GradCheckReport(max_err, len(flat), worst, epsilon)


def check_gradients(model, data, epsilon: float = 1e-5, n_samples: int = 100, seed: int = 0,
                    rows=None) -> GradCheckReport:
    """Finite-difference check of a model's full loss on ``data`` (no dropout)."""
    tape, loss, _ = model.loss(data, rows=rows)
    return check_tape_gradients(tape, loss, epsilon=epsilon, n_samples=n_samples, seed=seed)
