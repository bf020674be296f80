"""Quaternion scalars and component-major quaternion matrices.

A :class:`QTensor` keeps four dense real matrices ``r, i, j, k`` of identical
shape.  A quaternion vector in H^n is a QTensor with ``cols == 1``.

The Hamilton product of a quaternion matrix with a quaternion vector is
computed as 16 real matrix products arranged by :data:`HAMILTON_TABLE`.  Row
``a`` of the table gives, for output component ``a``, the (sign, weight
component) that multiplies input component ``b``::

        in:   r     i     j     k
    out r:  +Wr   -Wi   -Wj   -Wk
    out i:  +Wi   +Wr   -Wk   +Wj
    out j:  +Wj   +Wk   +Wr   -Wi
    out k:  +Wk   -Wj   +Wi   +Wr
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# algebraic identities are checked to this absolute tolerance in float64
ALGEBRA_TOL = 1e-12
# finite-difference gradient checks use this relative tolerance
GRADIENT_TOL = 1e-4
# layer-level equivalences (several chained products) use this tolerance
LAYER_TOL = 1e-10

COMPONENTS = ("r", "i", "j", "k")

# HAMILTON_TABLE[out][in] = (sign, weight component index)
HAMILTON_TABLE = (
    ((+1, 0), (-1, 1), (-1, 2), (-1, 3)),
    ((+1, 1), (+1, 0), (-1, 3), (+1, 2)),
    ((+1, 2), (+1, 3), (+1, 0), (-1, 1)),
    ((+1, 3), (-1, 2), (+1, 1), (+1, 0)),
)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Argument lies outside the domain of the operation."""


@dataclass(frozen=True)
class Quaternion:
    r: float
    i: float
    j: float
    k: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.as_tuple()):
            raise DomainError(f"non-finite quaternion component in {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.r, self.i, self.j, self.k)

    def __iter__(self):
        return iter(self.as_tuple())

    def __add__(self, other: Quaternion) -> Quaternion:
        return Quaternion(*(a + b for a, b in zip(self, other)))

    def __mul__(self, other: Quaternion) -> Quaternion:
        return hamilton(self, other)


def hamilton(q: Quaternion, p: Quaternion) -> Quaternion:
    """Hamilton product ``q ⊗ p``."""
    qr, qi, qj, qk = q
    pr, pi, pj, pk = p
    return Quaternion(
        qr * pr - qi * pi - qj * pj - qk * pk,
        qi * pr + qr * pi - qk * pj + qj * pk,
        qj * pr + qk * pi + qr * pj - qi * pk,
        qk * pr - qj * pi + qi * pj + qr * pk,
    )


def qconjugate(q: Quaternion) -> Quaternion:
    return Quaternion(q.r, -q.i, -q.j, -q.k)


def qnorm(q: Quaternion) -> float:
    return math.sqrt(q.r * q.r + q.i * q.i + q.j * q.j + q.k * q.k)


def qnormalize(q: Quaternion) -> Quaternion:
    n = qnorm(q)
    if n == 0.0:
        raise DomainError("cannot normalize the zero quaternion")
    return Quaternion(q.r / n, q.i / n, q.j / n, q.k / n)


@dataclass(frozen=True, eq=False)
class QTensor:
    """Quaternion matrix stored as four real ``rows x cols`` matrices."""

    r: np.ndarray
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        comps = []
        for name in COMPONENTS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.ndim != 2:
                raise DimensionError(f"component {name} must be 2-D, got shape {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            comps.append(arr)
        if len({c.shape for c in comps}) != 1:
            raise DimensionError(f"component shapes differ: {[c.shape for c in comps]}")

    @classmethod
    def zeros(cls, rows: int, cols: int = 1) -> QTensor:
        z = np.zeros((rows, cols))
        return cls(z, z, z, z)

    @classmethod
    def from_quaternions(cls, qs) -> QTensor:
        """Column vector from a sequence of :class:`Quaternion`."""
        arr = np.array([tuple(q) for q in qs], dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    @classmethod
    def from_stack(cls, stacked: np.ndarray) -> QTensor:
        """Inverse of :meth:`stack`: ``stacked`` has shape ``(4, rows, cols)``."""
        stacked = np.asarray(stacked, dtype=np.float64)
        if stacked.ndim != 3 or stacked.shape[0] != 4:
            raise DimensionError(f"expected (4, rows, cols), got {stacked.shape}")
        return cls(*stacked)

    @property
    def shape(self) -> tuple[int, int]:
        return self.r.shape

    @property
    def rows(self) -> int:
        return self.r.shape[0]

    @property
    def cols(self) -> int:
        return self.r.shape[1]

    def components(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.r, self.i, self.j, self.k)

    def stack(self) -> np.ndarray:
        return np.stack(self.components())

    def quaternion(self, row: int, col: int = 0) -> Quaternion:
        return Quaternion(*(float(c[row, col]) for c in self.components()))

    def allclose(self, other: QTensor, atol: float = ALGEBRA_TOL) -> bool:
        return self.shape == other.shape and bool(np.allclose(self.stack(), other.stack(), rtol=0.0, atol=atol))

    def __repr__(self):
        return f"QTensor(shape={self.shape})"


def _check_same_shape(q: QTensor, p: QTensor):
    if q.shape != p.shape:
        raise DimensionError(f"shape mismatch: {q.shape} vs {p.shape}")


def qadd(q: QTensor, p: QTensor) -> QTensor:
    _check_same_shape(q, p)
    return QTensor(*(a + b for a, b in zip(q.components(), p.components())))


def qscale(lam: float, q: QTensor) -> QTensor:
    return QTensor(*(lam * c for c in q.components()))


def hamilton_matmul(W: QTensor, x: QTensor) -> QTensor:
    """``W ⊗ x`` for a quaternion matrix ``W`` [m x n] and ``x`` [n x c].

    Each output component is the signed sum of four real products picked from
    :data:`HAMILTON_TABLE`.
    """
    if W.cols != x.rows:
        raise DimensionError(f"cannot multiply {W.shape} by {x.shape}")
    w = W.components()
    h = x.components()
    out = []
    for row in HAMILTON_TABLE:
        acc = np.zeros((W.rows, x.cols))
        for b, (sign, wc) in enumerate(row):
            acc += sign * (w[wc] @ h[b])
        out.append(acc)
    return QTensor(*out)


def hamilton_block(W: QTensor) -> np.ndarray:
    """Real ``(4m) x (4n)`` matrix acting on stacked ``[x_r; x_i; x_j; x_k]``."""
    w = W.components()
    return np.block([[sign * w[wc] for sign, wc in row] for row in HAMILTON_TABLE])


def qconcat(q: QTensor, p: QTensor) -> QTensor:
    """Row-wise quaternion concatenation ``[q; p]`` done per component."""
    if q.cols != p.cols:
        raise DimensionError(f"column mismatch: {q.shape} vs {p.shape}")
    return QTensor(*(np.vstack([a, b]) for a, b in zip(q.components(), p.components())))


def vec(q: QTensor) -> np.ndarray:
    """``[q_r; q_i; q_j; q_k]`` for a quaternion vector (``cols == 1``)."""
    if q.cols != 1:
        raise DimensionError(f"vec expects a quaternion vector, got shape {q.shape}")
    return np.concatenate([c[:, 0] for c in q.components()])


def unvec(v: np.ndarray) -> QTensor:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] % 4:
        raise DimensionError(f"length must be a multiple of 4, got shape {v.shape}")
    return QTensor(*np.split(v, 4))
