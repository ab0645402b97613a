"""Exception hierarchy shared by every stage of the lab."""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

Shape = Tuple[int, ...]


class PSLoraError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(PSLoraError, ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: Shape, detail: str = "") -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join("x".join(str(dim) for dim in shape) for shape in self.shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class RankError(PSLoraError, ValueError):
    """Adapter rank outside [1, min(d, k)]."""

    def __init__(self, rank: int, d: int, k: int) -> None:
        self.rank, self.d, self.k = rank, d, k
        super().__init__(f"rank {rank} invalid for a {d}x{k} layer (need 1 <= r <= {min(d, k)})")


class LabelError(PSLoraError, ValueError):
    """A class label outside [0, C)."""


class NonFiniteLossError(PSLoraError, RuntimeError):
    """Training produced a NaN/Inf loss."""

    def __init__(self, task_index: int, step: int, value: float) -> None:
        self.task_index, self.step, self.value = task_index, step, value
        super().__init__(f"non-finite loss {value!r} on task {task_index} at step {step}")


class ConvergenceError(PSLoraError, RuntimeError):
    """An iterative estimate did not converge."""


class CheckpointError(PSLoraError, ValueError):
    """Checkpoint file is malformed; ``offset`` locates the problem."""

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)


class MetricError(PSLoraError, ValueError):
    """A metric is undefined for the given accuracy matrix."""


class ConfigError(PSLoraError, ValueError):
    """Invalid configuration or missing inputs."""

    def __init__(self, message: str, missing: Sequence[str] = ()) -> None:
        self.missing = list(missing)
        if self.missing:
            message = f"{message}: {', '.join(self.missing)}"
        super().__init__(message)


__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConvergenceError",
    "LabelError",
    "MetricError",
    "NonFiniteLossError",
    "PSLoraError",
    "RankError",
    "ShapeError",
]
