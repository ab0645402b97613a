"""Low-rank adapters and their weight deltas."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from src.nn.tape import Matrix, add, matmul, scale
from src.shared.errors import RankError, ShapeError


@dataclass(frozen=True)
class LoraAdapter:
    """One task's (A, B) pair bound to a base layer; delta = A @ B."""

    task_index: int
    layer_id: str
    A: Matrix
    B: Matrix

    def __post_init__(self) -> None:
        if self.A.cols != self.B.rows:
            raise ShapeError("adapter", self.A.shape, self.B.shape, detail="A.cols must equal B.rows")
        d, k = self.A.rows, self.B.cols
        if not 1 <= self.rank <= min(d, k):
            raise RankError(self.rank, d, k)

    @property
    def rank(self) -> int:
        return self.A.cols

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.A.rows, self.B.cols)

    def with_factors(self, A: Matrix, B: Matrix) -> "LoraAdapter":
        return LoraAdapter(task_index=self.task_index, layer_id=self.layer_id, A=A, B=B)


def new_adapter(
    layer_dims: Tuple[int, int],
    rank: int,
    seed: int,
    task_index: int = 1,
    layer_id: str = "",
) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, 1/r) entry-wise (std 1/sqrt(r)), B = 0, so delta is exactly zero."""
    d, k = layer_dims
    if not 1 <= rank <= min(d, k):
        raise RankError(rank, d, k)
    rng = np.random.default_rng(seed)
    A = Matrix(rng.normal(scale=1.0 / np.sqrt(rank), size=(d, rank)))
    B = Matrix.zeros(rank, k)
    return LoraAdapter(task_index=task_index, layer_id=layer_id, A=A, B=B)


def delta(adapter: LoraAdapter, scaling: float = 1.0) -> Matrix:
    """A @ B (times the LoRA scaling factor); recorded on the active tape."""
    product = matmul(adapter.A, adapter.B)
    return product if scaling == 1.0 else scale(product, scaling)


def cumulative_delta(
    adapters: Sequence[LoraAdapter],
    layer_dims: Tuple[int, int],
    scaling: float = 1.0,
) -> Matrix:
    """Sum of the adapters' deltas; the zero matrix of ``layer_dims`` when empty."""
    total = Matrix.zeros(*layer_dims)
    for adapter in adapters:
        if adapter.dims != tuple(layer_dims):
            raise ShapeError("cumulative_delta", adapter.dims, tuple(layer_dims))
        total = add(total, delta(adapter, scaling))
    return total


def refactor_delta(matrix: Matrix, rank: int, task_index: int, layer_id: str) -> LoraAdapter:
    """Best rank-r factorisation of a dense delta: A = U_r diag(s_r), B = V_r^T."""
    d, k = matrix.shape
    if not 1 <= rank <= min(d, k):
        raise RankError(rank, d, k)
    u, s, vt = np.linalg.svd(matrix.data.astype(np.float64), full_matrices=False)
    A = Matrix(u[:, :rank] * s[:rank])
    B = Matrix(vt[:rank, :])
    return LoraAdapter(task_index=task_index, layer_id=layer_id, A=A, B=B)


__all__ = ["LoraAdapter", "cumulative_delta", "delta", "new_adapter", "refactor_delta"]
