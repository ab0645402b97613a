"""Dense matrices with a reverse-mode tape.

Matrices are immutable float32 carriers. Primitive ops record themselves on the
thread's active :class:`Tape` whenever one of their operands depends on a
watched leaf; :func:`grad` walks the tape backwards and returns the adjoint of
every watched leaf. Reductions and products accumulate in float64.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.shared.errors import LabelError, ShapeError


_STATE = threading.local()


def _storage() -> np.dtype:
    return getattr(_STATE, "dtype", np.float32)


@contextmanager
def storage_dtype(dtype: type) -> Iterator[None]:
    """Temporarily change the storage precision of matrices built on this thread."""
    previous = _storage()
    _STATE.dtype = dtype
    try:
        yield
    finally:
        _STATE.dtype = previous


class Matrix:
    """Immutable 2-D array of floats stored row-major."""

    __slots__ = ("_data", "__weakref__")

    def __init__(self, data: object) -> None:
        array = np.array(data, dtype=_storage())
        if array.ndim == 0:
            array = array.reshape(1, 1)
        if array.ndim != 2:
            raise ShapeError("matrix", array.shape, detail="expected a 2-D array")
        if array.shape[0] < 1 or array.shape[1] < 1:
            raise ShapeError("matrix", array.shape, detail="dimensions must be positive")
        array.setflags(write=False)
        self._data = array

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.ones((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(np.eye(n))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def rows(self) -> int:
        return int(self._data.shape[0])

    @property
    def cols(self) -> int:
        return int(self._data.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def is_scalar(self) -> bool:
        return self.shape == (1, 1)

    def numpy(self) -> np.ndarray:
        """Writable copy of the entries."""
        return np.array(self._data)

    def item(self) -> float:
        if not self.is_scalar:
            raise ShapeError("item", self.shape, detail="not a 1x1 matrix")
        return float(self._data[0, 0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, dtype={self._data.dtype.name})"


VJP = Callable[[np.ndarray, Sequence[np.ndarray], np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass(frozen=True)
class Node:
    """One recorded primitive: operands, result and the rules to replay/adjoint it."""

    op: str
    inputs: Tuple[Matrix, ...]
    output: Matrix
    forward: Callable[..., np.ndarray]
    vjp: VJP


class Tape:
    """Ordered record of primitive operations for one forward pass.

    A tape belongs to the thread that entered it and is discarded after the
    gradient of its scalar output has been read.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: List[Matrix] = []
        self._tracked: Dict[int, Matrix] = {}

    def watch(self, *leaves: Matrix) -> None:
        for leaf in leaves:
            if id(leaf) not in self._tracked:
                self._tracked[id(leaf)] = leaf
                self.leaves.append(leaf)

    def tracks(self, matrix: Matrix) -> bool:
        return id(matrix) in self._tracked

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._tracked[id(node.output)] = node.output

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded node from the leaves and constants."""
        values: Dict[int, np.ndarray] = {}
        outputs: List[np.ndarray] = []
        for node in self.nodes:
            args = [values.get(id(m), m.data) for m in node.inputs]
            value = np.asarray(node.forward(*args), dtype=node.output.data.dtype)
            values[id(node.output)] = value
            outputs.append(value)
        return outputs

    def __enter__(self) -> "Tape":
        stack = getattr(_STATE, "tapes", None)
        if stack is None:
            stack = _STATE.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _STATE.tapes.pop()


def active_tape() -> Optional[Tape]:
    stack = getattr(_STATE, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on this thread (evaluation passes)."""
    saved = getattr(_STATE, "tapes", None)
    _STATE.tapes = []
    try:
        yield
    finally:
        _STATE.tapes = saved


def _apply(op: str, forward: Callable[..., np.ndarray], vjp: VJP, *inputs: Matrix) -> Matrix:
    out = Matrix(forward(*[m.data for m in inputs]))
    tape = active_tape()
    if tape is not None and any(tape.tracks(m) for m in inputs):
        tape.record(Node(op=op, inputs=tuple(inputs), output=out, forward=forward, vjp=vjp))
    return out


def _f64(array: np.ndarray) -> np.ndarray:
    return np.asarray(array, dtype=np.float64)


def _same_shape(op: str, a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError("matmul", a.shape, b.shape, detail="a.cols must equal b.rows")
    return _apply(
        "matmul",
        lambda x, y: _f64(x) @ _f64(y),
        lambda g, xs, _out: (g @ _f64(xs[1]).T, _f64(xs[0]).T @ g),
        a,
        b,
    )


def add(a: Matrix, b: Matrix) -> Matrix:
    _same_shape("add", a, b)
    return _apply("add", lambda x, y: _f64(x) + _f64(y), lambda g, _xs, _out: (g, g), a, b)


def sub(a: Matrix, b: Matrix) -> Matrix:
    _same_shape("sub", a, b)
    return _apply("sub", lambda x, y: _f64(x) - _f64(y), lambda g, _xs, _out: (g, -g), a, b)


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Element-wise (Hadamard) product."""
    _same_shape("mul", a, b)
    return _apply(
        "mul",
        lambda x, y: _f64(x) * _f64(y),
        lambda g, xs, _out: (g * _f64(xs[1]), g * _f64(xs[0])),
        a,
        b,
    )


def scale(a: Matrix, factor: float) -> Matrix:
    c = float(factor)
    return _apply("scale", lambda x: _f64(x) * c, lambda g, _xs, _out: (g * c,), a)


def transpose(a: Matrix) -> Matrix:
    return _apply("transpose", lambda x: _f64(x).T, lambda g, _xs, _out: (g.T,), a)


def add_row(a: Matrix, row: Matrix) -> Matrix:
    """Add a 1xk row vector to every row of a (explicit bias broadcast)."""
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError("add_row", a.shape, row.shape, detail="row must be 1 x a.cols")
    return _apply(
        "add_row",
        lambda x, r: _f64(x) + _f64(r),
        lambda g, _xs, _out: (g, g.sum(axis=0, keepdims=True)),
        a,
        row,
    )


def tanh_map(a: Matrix) -> Matrix:
    return _apply(
        "tanh",
        lambda x: np.tanh(_f64(x)),
        lambda g, _xs, out: (g * (1.0 - _f64(out) ** 2),),
        a,
    )


def sum_all(a: Matrix) -> Matrix:
    return _apply(
        "sum",
        lambda x: np.array([[_f64(x).sum()]]),
        lambda g, xs, _out: (np.full(xs[0].shape, g[0, 0]),),
        a,
    )


def mean_all(a: Matrix) -> Matrix:
    n = a.rows * a.cols
    return _apply(
        "mean",
        lambda x: np.array([[_f64(x).sum() / n]]),
        lambda g, xs, _out: (np.full(xs[0].shape, g[0, 0] / n),),
        a,
    )


def frob_norm_sq(a: Matrix) -> Matrix:
    return _apply(
        "frob_norm_sq",
        lambda x: np.array([[np.square(_f64(x)).sum()]]),
        lambda g, xs, _out: (2.0 * g[0, 0] * _f64(xs[0]),),
        a,
    )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent(logits: Matrix, labels: Sequence[int]) -> Matrix:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != logits.rows:
        raise ShapeError("softmax_xent", logits.shape, (y.shape[0],), detail="one label per row")
    if y.size and (y.min() < 0 or y.max() >= logits.cols):
        raise LabelError(f"labels must lie in [0, {logits.cols}), got range [{y.min()}, {y.max()}]")
    rows = np.arange(y.shape[0])
    batch = y.shape[0]

    def forward(z: np.ndarray) -> np.ndarray:
        logp = _log_softmax(_f64(z))
        return np.array([[-logp[rows, y].sum() / batch]])

    def vjp(g: np.ndarray, xs: Sequence[np.ndarray], _out: np.ndarray) -> Tuple[np.ndarray]:
        probs = np.exp(_log_softmax(_f64(xs[0])))
        probs[rows, y] -= 1.0
        return (probs * (g[0, 0] / batch),)

    return _apply("softmax_xent", forward, vjp, logits)


def grad(tape: Tape, output: Matrix) -> Dict[Matrix, Matrix]:
    """Adjoints of ``output`` with respect to every watched leaf of ``tape``.

    Leaves that do not influence ``output`` get an all-zero gradient.
    """
    if not output.is_scalar:
        raise ShapeError("grad", output.shape, detail="output must be a 1x1 scalar")
    adjoints: Dict[int, np.ndarray] = {}
    if tape.tracks(output):
        adjoints[id(output)] = np.ones((1, 1))
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.vjp(g, [m.data for m in node.inputs], node.output.data)
        for operand, part in zip(node.inputs, parts):
            if part is None or not tape.tracks(operand):
                continue
            key = id(operand)
            adjoints[key] = adjoints[key] + part if key in adjoints else np.array(part, dtype=np.float64)
    result: Dict[Matrix, Matrix] = {}
    for leaf in tape.leaves:
        g = adjoints.get(id(leaf))
        result[leaf] = Matrix(g) if g is not None else Matrix.zeros(*leaf.shape)
    return result


__all__ = [
    "Matrix",
    "Node",
    "Tape",
    "active_tape",
    "add",
    "add_row",
    "frob_norm_sq",
    "grad",
    "matmul",
    "mean_all",
    "mul",
    "no_grad",
    "scale",
    "softmax_xent",
    "storage_dtype",
    "sub",
    "sum_all",
    "tanh_map",
    "transpose",
]
