"""Synthetic domain-incremental task sequences with controllable similarity.

Every task shares the label space. Class means of task 1 sit on a circle in a
seeded 2-D plane of the input space plus a small off-plane component; task t
rotates the in-plane part by its scheduled angle. Rotating by a large angle
moves each class onto the territory of its neighbours, which is what makes a
task "dissimilar" to the ones before it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

LOGGER = logging.getLogger(__name__)

DROP_FIXTURE_ANGLES = [0.0, 15.0, 20.0, 120.0]


def default_angles(n_tasks: int) -> List[float]:
    """Drop fixture for N=4; otherwise a slow drift with a jump on every fourth task."""
    if n_tasks == 4:
        return list(DROP_FIXTURE_ANGLES)
    angles = []
    for i in range(n_tasks):
        drift = min(180.0, 8.0 * i)
        if i % 4 == 3:
            drift = (drift + 100.0) % 180.0
        angles.append(drift)
    return angles


class SequenceSpec(BaseModel):
    """How to generate a task sequence."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_tasks: int = Field(default=4, ge=1)
    d_in: int = Field(default=20, ge=3)
    n_classes: int = Field(default=5, ge=2)
    samples_per_task: int = Field(default=500, ge=1)
    test_per_task: int = Field(default=200, ge=1)
    angles: Optional[List[float]] = None
    order: Optional[List[int]] = None
    master_seed: int = 0
    in_plane_radius: float = Field(default=3.0, gt=0)
    off_plane_scale: float = Field(default=0.5, ge=0)

    @model_validator(mode="after")
    def _check_schedule(self) -> "SequenceSpec":
        if self.angles is not None:
            if len(self.angles) != self.n_tasks:
                raise ValueError(f"angles has {len(self.angles)} entries for {self.n_tasks} tasks")
            if any(a < 0 or a > 180 for a in self.angles):
                raise ValueError("angles must lie in [0, 180]")
            if self.angles[0] != 0:
                raise ValueError(f"angles are relative to task 1, so the first must be 0, got {self.angles[0]}")
        if self.order is not None and sorted(self.order) != list(range(1, self.n_tasks + 1)):
            raise ValueError(f"order {self.order} is not a permutation of 1..{self.n_tasks}")
        return self

    @property
    def resolved_angles(self) -> List[float]:
        return list(self.angles) if self.angles is not None else default_angles(self.n_tasks)

    @property
    def resolved_order(self) -> List[int]:
        return list(self.order) if self.order is not None else list(range(1, self.n_tasks + 1))


@dataclass(frozen=True)
class TaskDataset:
    name: str
    slot: int
    angle: float
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    means: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.y_train.shape[0])

    @property
    def test_size(self) -> int:
        return int(self.y_test.shape[0])


@dataclass(frozen=True)
class TaskSequence:
    spec: SequenceSpec
    tasks: List[TaskDataset]

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[TaskDataset]:
        return iter(self.tasks)

    def __getitem__(self, index: int) -> TaskDataset:
        return self.tasks[index]

    @property
    def sizes(self) -> List[int]:
        return [task.size for task in self.tasks]


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([abs(int(k)) for k in keys]))


def _plane(spec: SequenceSpec) -> np.ndarray:
    basis, _ = np.linalg.qr(_rng(spec.master_seed, 0, 0).normal(size=(spec.d_in, 2)))
    return basis.T  # rows u, v


def base_means(spec: SequenceSpec) -> np.ndarray:
    """Class means of the unrotated (angle 0) task, shape C x d_in."""
    rng = _rng(spec.master_seed, 0, 1)
    plane = _plane(spec)
    phases = 2.0 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    phases = phases + rng.normal(scale=0.15, size=spec.n_classes)
    in_plane = spec.in_plane_radius * np.stack([np.cos(phases), np.sin(phases)], axis=1)
    off = rng.normal(scale=spec.off_plane_scale, size=(spec.n_classes, spec.d_in))
    off = off - (off @ plane.T) @ plane
    return in_plane @ plane + off


def rotate_means(spec: SequenceSpec, means: np.ndarray, angle_deg: float) -> np.ndarray:
    plane = _plane(spec)
    coords = means @ plane.T
    theta = np.deg2rad(angle_deg)
    rotation = np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]])
    return means - coords @ plane + (coords @ rotation) @ plane


def _draw(means: np.ndarray, n: int, rng: np.random.Generator) -> tuple:
    n_classes, d = means.shape
    labels = rng.permutation(np.arange(n) % n_classes)
    x = means[labels] + rng.normal(size=(n, d))
    return x.astype(np.float32), labels.astype(np.int64)


def gen_task(spec: SequenceSpec, slot: int) -> TaskDataset:
    """Generate the dataset for generation slot ``slot`` (1-based)."""
    if not 1 <= slot <= spec.n_tasks:
        raise ValueError(f"slot {slot} outside [1, {spec.n_tasks}]")
    angle = spec.resolved_angles[slot - 1]
    means = rotate_means(spec, base_means(spec), angle)
    x_train, y_train = _draw(means, spec.samples_per_task, _rng(spec.master_seed, slot, 1))
    x_test, y_test = _draw(means, spec.test_per_task, _rng(spec.master_seed, slot, 2))
    return TaskDataset(
        name=f"task{slot}",
        slot=slot,
        angle=angle,
        x_train=x_train,
        y_train=y_train,
        x_test=x_test,
        y_test=y_test,
        means=means,
    )


def make_sequence(spec: SequenceSpec) -> TaskSequence:
    """Generate every task and lay them out in ``spec.order``."""
    tasks = [gen_task(spec, slot) for slot in spec.resolved_order]
    LOGGER.debug("generated %d tasks, order %s", len(tasks), spec.resolved_order)
    return TaskSequence(spec=spec, tasks=tasks)


def mixture_dataset(spec: SequenceSpec, seed: int, angles: Sequence[float] = (0.0, 10.0, 20.0)) -> TaskDataset:
    """Generic pretraining pool drawn from the same generator under a held-out seed."""
    held_out = spec.model_copy(update={"master_seed": seed, "n_tasks": len(angles), "angles": list(angles), "order": None})
    parts = [gen_task(held_out, slot) for slot in range(1, len(angles) + 1)]
    return TaskDataset(
        name="mixture",
        slot=0,
        angle=0.0,
        x_train=np.concatenate([p.x_train for p in parts]),
        y_train=np.concatenate([p.y_train for p in parts]),
        x_test=np.concatenate([p.x_test for p in parts]),
        y_test=np.concatenate([p.y_test for p in parts]),
        means=parts[0].means,
    )


def mean_cosine(a: TaskDataset, b: TaskDataset) -> float:
    """Average cosine between corresponding class means of two tasks."""
    num = np.sum(a.means * b.means, axis=1)
    den = np.linalg.norm(a.means, axis=1) * np.linalg.norm(b.means, axis=1)
    return float(np.mean(num / den))


def cosine_matrix(sequence: TaskSequence) -> np.ndarray:
    n = len(sequence)
    return np.array([[mean_cosine(sequence[i], sequence[j]) for j in range(n)] for i in range(n)])


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield index arrays covering a fresh permutation of range(n)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def export_csv(dataset: TaskDataset, path: Path, split: str = "train") -> Path:
    """Write one split as CSV: header f0..f{d-1},label; floats with 9 significant digits."""
    x, y = (dataset.x_train, dataset.y_train) if split == "train" else (dataset.x_test, dataset.y_test)
    frame = pd.DataFrame(x, columns=[f"f{i}" for i in range(x.shape[1])])
    frame["label"] = y
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.9g")
    return path


__all__ = [
    "DROP_FIXTURE_ANGLES",
    "SequenceSpec",
    "TaskDataset",
    "TaskSequence",
    "base_means",
    "cosine_matrix",
    "default_angles",
    "export_csv",
    "gen_task",
    "make_sequence",
    "mean_cosine",
    "minibatches",
    "mixture_dataset",
    "rotate_means",
]