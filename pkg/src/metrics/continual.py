"""Continual-learning metrics over the accuracy matrix.

``a(i, j)`` is the accuracy on task ``i`` after training through task ``j``
(1-based). The matrix stores the lower triangle ``i <= j``; the pre-task
evaluations ``a(i, i-1)`` needed by forward transfer are kept apart in
``pre_task``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from src.shared.errors import MetricError


@dataclass
class AccuracyMatrix:
    n_tasks: int
    sizes: List[int]
    entries: Dict[Tuple[int, int], float] = field(default_factory=dict)
    pre_task: Dict[int, float] = field(default_factory=dict)
    scratch: Optional[List[float]] = None

    def __post_init__(self) -> None:
        if self.n_tasks < 1:
            raise MetricError("an accuracy matrix needs at least one task")
        if len(self.sizes) != self.n_tasks or any(s <= 0 for s in self.sizes):
            raise MetricError(f"need {self.n_tasks} positive task sizes, got {self.sizes}")
        for (i, j), value in list(self.entries.items()):
            self.set(i, j, value)
        if self.scratch is not None:
            if len(self.scratch) != self.n_tasks:
                raise MetricError(f"scratch has {len(self.scratch)} entries for {self.n_tasks} tasks")
            for value in self.scratch:
                _check_unit(value, "scratch accuracy")

    def set(self, i: int, j: int, value: float) -> None:
        if not 1 <= i <= j <= self.n_tasks:
            raise MetricError(f"entry ({i}, {j}) outside the lower triangle of a {self.n_tasks}-task matrix")
        self.entries[(i, j)] = _check_unit(value, f"a({i},{j})")

    def set_pre_task(self, i: int, value: float) -> None:
        if not 1 <= i <= self.n_tasks:
            raise MetricError(f"pre-task entry for task {i} outside [1, {self.n_tasks}]")
        self.pre_task[i] = _check_unit(value, f"a({i},{i - 1})")

    def get(self, i: int, j: int) -> float:
        try:
            return self.entries[(i, j)]
        except KeyError:
            raise MetricError(f"missing accuracy entry a({i},{j})") from None

    def row(self, i: int) -> List[float]:
        """a(i, i..N), every entry required."""
        return [self.get(i, j) for j in range(i, self.n_tasks + 1)]

    def column(self, j: int) -> List[float]:
        return [self.get(i, j) for i in range(1, j + 1)]

    @property
    def complete(self) -> bool:
        n = self.n_tasks
        return all((i, j) in self.entries for j in range(1, n + 1) for i in range(1, j + 1))

    def to_dict(self) -> dict:
        payload: dict = {
            "n_tasks": self.n_tasks,
            "entries": [{"i": i, "j": j, "acc": acc} for (i, j), acc in sorted(self.entries.items(), key=lambda kv: (kv[0][1], kv[0][0]))],
            "sizes": list(self.sizes),
        }
        if self.pre_task:
            payload["pre_task"] = [{"i": i, "acc": acc} for i, acc in sorted(self.pre_task.items())]
        if self.scratch is not None:
            payload["scratch"] = list(self.scratch)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "AccuracyMatrix":
        try:
            n_tasks = int(payload["n_tasks"])
            entries = {(int(e["i"]), int(e["j"])): float(e["acc"]) for e in payload["entries"]}
            sizes = [int(s) for s in payload["sizes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise MetricError(f"malformed accuracy matrix document: {exc}") from exc
        matrix = cls(n_tasks=n_tasks, sizes=sizes, entries=entries, scratch=payload.get("scratch"))
        for item in payload.get("pre_task", []):
            matrix.set_pre_task(int(item["i"]), float(item["acc"]))
        return matrix


def _check_unit(value: float, name: str) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise MetricError(f"{name}={value} outside [0, 1]")
    return value


def _need_two(m: AccuracyMatrix, metric: str) -> None:
    if m.n_tasks < 2:
        raise MetricError(f"{metric} is undefined for a single task")


def final_acc(m: AccuracyMatrix) -> float:
    """Size-weighted mean of the last column."""
    last = m.column(m.n_tasks)
    total = sum(m.sizes)
    return sum(size * acc for size, acc in zip(m.sizes, last)) / total


def bwt(m: AccuracyMatrix) -> float:
    _need_two(m, "BWT")
    n = m.n_tasks
    return sum(m.get(i, n) - m.get(i, i) for i in range(1, n)) / (n - 1)


def fwt(m: AccuracyMatrix) -> float:
    _need_two(m, "FWT")
    if m.scratch is None:
        raise MetricError("FWT needs scratch accuracies")
    n = m.n_tasks
    missing = [i for i in range(2, n + 1) if i not in m.pre_task]
    if missing:
        raise MetricError(f"FWT needs pre-task accuracies for tasks {missing}")
    return sum(m.pre_task[i] - m.scratch[i - 1] for i in range(2, n + 1)) / (n - 1)


def fr(m: AccuracyMatrix, literal: bool = False) -> float:
    """Mean drop from each task's peak to its final accuracy.

    The peak ranges over ``j in [i, N]``. ``literal=True`` takes the peak as the
    diagonal entry alone, which reduces FR to ``-BWT``.
    """
    _need_two(m, "FR")
    n = m.n_tasks
    drops = []
    for i in range(1, n):
        row = m.row(i)
        peak = row[0] if literal else max(row)
        drops.append(peak - row[-1])
    return sum(drops) / (n - 1)


def aaa(m: AccuracyMatrix) -> float:
    """Mean over stages of the unweighted seen-task average."""
    n = m.n_tasks
    stages = [sum(m.column(j)) / j for j in range(1, n + 1)]
    return sum(stages) / n


def seed_std(values: Sequence[float]) -> float:
    """Sample standard deviation (n - 1 denominator); 0 for a single value."""
    n = len(values)
    if n == 0:
        raise MetricError("seed_std needs at least one value")
    if n == 1:
        return 0.0
    mean = sum(values) / n
    return math.sqrt(sum((x - mean) ** 2 for x in values) / (n - 1))


def summarize(m: AccuracyMatrix, fr_literal: bool = False) -> Dict[str, Optional[float]]:
    """All metrics at once; entries that are undefined for ``m`` are None."""
    multi = m.n_tasks >= 2
    can_fwt = multi and m.scratch is not None and all(i in m.pre_task for i in range(2, m.n_tasks + 1))
    return {
        "acc": final_acc(m),
        "bwt": bwt(m) if multi else None,
        "fwt": fwt(m) if can_fwt else None,
        "fr": fr(m, literal=fr_literal) if multi else None,
        "aaa": aaa(m),
    }


__all__ = ["AccuracyMatrix", "aaa", "bwt", "final_acc", "fr", "fwt", "seed_std", "summarize"]
