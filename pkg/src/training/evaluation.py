"""Argmax accuracy of a model, or of bare effective weights, on one task."""
from __future__ import annotations

from functools import partial
from multiprocessing.pool import ThreadPool
from typing import List, Sequence, Union

import numpy as np

from src.data.synthetic import TaskDataset
from src.lora.model import BaseModel, ContinualModel, WeightPair, mlp_forward
from src.nn.tape import Matrix, no_grad

EVAL_CHUNK = 256

Evaluable = Union[ContinualModel, BaseModel, Sequence[WeightPair]]


def resolve_weights(target: Evaluable) -> List[WeightPair]:
    with no_grad():
        if isinstance(target, ContinualModel):
            return target.effective_weights()
        if isinstance(target, BaseModel):
            return target.weights()
        return list(target)


def predict(weights: Sequence[WeightPair], x: np.ndarray, activation: str = "tanh") -> np.ndarray:
    """Class predictions; ``np.argmax`` resolves ties toward the lowest index."""
    with no_grad():
        logits = mlp_forward(weights, Matrix(x), activation)
    return np.argmax(logits.data, axis=1)


def _count_correct(bounds: tuple, weights: Sequence[WeightPair], x: np.ndarray, y: np.ndarray) -> int:
    lo, hi = bounds
    return int(np.sum(predict(weights, x[lo:hi]) == y[lo:hi]))


def evaluate(target: Evaluable, dataset: TaskDataset, threads: int = 1, split: str = "test") -> float:
    """Fraction of correct predictions on ``split`` of ``dataset``.

    Samples are cut into fixed-size chunks so any thread count produces the same
    per-chunk arithmetic; the result is a sum of counts.
    """
    weights = resolve_weights(target)
    x, y = (dataset.x_test, dataset.y_test) if split == "test" else (dataset.x_train, dataset.y_train)
    n = int(y.shape[0])
    if n == 0:
        return 0.0
    chunks = [(lo, min(lo + EVAL_CHUNK, n)) for lo in range(0, n, EVAL_CHUNK)]
    work = partial(_count_correct, weights=weights, x=x, y=y)
    if threads > 1 and len(chunks) > 1:
        with ThreadPool(processes=min(threads, len(chunks))) as pool:
            counts = pool.map(work, chunks)
    else:
        counts = [work(chunk) for chunk in chunks]
    return sum(counts) / n


__all__ = ["EVAL_CHUNK", "Evaluable", "evaluate", "predict", "resolve_weights"]
