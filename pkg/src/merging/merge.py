"""Post-training consolidation of per-task adapter deltas."""
from __future__ import annotations

import hashlib
import logging
import math
import time
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.lora.adapter import LoraAdapter, delta
from src.lora.model import BaseModel as FrozenBase
from src.lora.model import WeightPair, compose_weight
from src.nn.tape import Matrix
from src.shared.errors import ConfigError, ShapeError

LOGGER = logging.getLogger(__name__)

MergeStrategy = Literal["magnitude_max", "average", "ties"]


class MergePolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    strategy: MergeStrategy = "magnitude_max"
    ties_trim_fraction: float = Field(default=0.8, gt=0, le=1)


def merge_pair(x: Matrix, y: Matrix) -> Matrix:
    """Entry-wise pick of the larger magnitude; equal magnitudes keep ``x``."""
    if x.shape != y.shape:
        raise ShapeError("merge_pair", x.shape, y.shape)
    return Matrix(np.where(np.abs(y.data) > np.abs(x.data), y.data, x.data))


def _stack(deltas: Sequence[Matrix]) -> np.ndarray:
    if not deltas:
        raise ValueError("merge_fold needs at least one delta")
    shape = deltas[0].shape
    for d in deltas[1:]:
        if d.shape != shape:
            raise ShapeError("merge_fold", shape, d.shape)
    return np.stack([d.data.astype(np.float64) for d in deltas])


def _trim(values: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the ``keep_fraction`` largest-magnitude entries of one input."""
    flat = values.reshape(-1)
    keep = max(1, int(math.ceil(keep_fraction * flat.size - 1e-9)))
    order = np.argsort(-np.abs(flat), kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:keep]] = True
    return np.where(mask, flat, 0.0).reshape(values.shape)


def _ties(stack: np.ndarray, keep_fraction: float) -> np.ndarray:
    trimmed = np.stack([_trim(layer, keep_fraction) for layer in stack])
    positive = np.where(trimmed > 0, trimmed, 0.0).sum(axis=0)
    negative = np.where(trimmed < 0, -trimmed, 0.0).sum(axis=0)
    elected = np.sign(positive - negative)
    # equal mass: the earliest non-zero survivor decides
    nonzero = trimmed != 0
    first = np.argmax(nonzero, axis=0)
    first_sign = np.sign(np.take_along_axis(trimmed, first[None, ...], axis=0)[0])
    elected = np.where((positive == negative) & nonzero.any(axis=0), first_sign, elected)
    agree = (np.sign(trimmed) == elected[None, ...]) & nonzero
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def merge_fold(deltas: Sequence[Matrix], policy: MergePolicy) -> Matrix:
    """Combine ordered deltas into one dense matrix under ``policy``."""
    stack = _stack(deltas)
    if len(deltas) == 1:
        return deltas[0]
    if policy.strategy == "magnitude_max":
        merged = deltas[0]
        for d in deltas[1:]:
            merged = merge_pair(merged, d)
        return merged
    if policy.strategy == "average":
        return Matrix(stack.mean(axis=0))
    return Matrix(_ties(stack, policy.ties_trim_fraction))


def selection_fractions(deltas: Sequence[Matrix]) -> List[float]:
    """Share of entries that the magnitude left fold takes from each input."""
    stack = _stack(deltas)
    current = stack[0]
    source = np.zeros(current.shape, dtype=np.int64)
    for idx in range(1, stack.shape[0]):
        take = np.abs(stack[idx]) > np.abs(current)
        current = np.where(take, stack[idx], current)
        source[take] = idx
    counts = np.bincount(source.reshape(-1), minlength=stack.shape[0])
    return [float(c) / source.size for c in counts]


def merged_weights(
    base: FrozenBase,
    adapters: Mapping[str, Sequence[LoraAdapter]],
    policy: MergePolicy,
    scaling: float = 1.0,
    injected: Optional[Sequence[str]] = None,
) -> List[WeightPair]:
    """Dense W0 + merge_fold(deltas) for each injected layer; other layers pass through."""
    layer_ids = list(injected) if injected is not None else base.layer_ids
    missing = [lid for lid in layer_ids if lid not in adapters]
    if missing:
        raise ConfigError("adapters missing for injected layers", missing=missing)
    pairs: List[WeightPair] = []
    for layer in base.layers:
        group = adapters.get(layer.layer_id, []) if layer.layer_id in layer_ids else []
        if group:
            merged = merge_fold([delta(a, scaling) for a in group], policy)
            w = compose_weight(layer.weight, merged)
        else:
            w = layer.weight
        pairs.append((w, layer.bias))
    return pairs


def merge_history(policy: MergePolicy):
    """History combiner for ContinualModel when merging after every task."""

    def combine(deltas: List[Matrix], _dims: Tuple[int, int]) -> Matrix:
        return merge_fold(deltas, policy)

    return combine


def merge_checksum(matrices: Sequence[Matrix]) -> str:
    digest = hashlib.sha256()
    for m in matrices:
        digest.update(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
    return digest.hexdigest()


def time_merge_fold(
    n_adapters: int,
    dims: Tuple[int, int],
    policy: Optional[MergePolicy] = None,
    repeats: int = 5,
    seed: int = 0,
) -> float:
    """Best-of-``repeats`` wall time of one merge_fold over random deltas."""
    rng = np.random.default_rng(seed)
    deltas = [Matrix(rng.normal(size=dims)) for _ in range(n_adapters)]
    policy = policy or MergePolicy()
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        merge_fold(deltas, policy)
        best = min(best, time.perf_counter() - start)
    LOGGER.debug("merge_fold t=%d dims=%s: %.6fs", n_adapters, dims, best)
    return best


def per_layer_selection(adapters: Mapping[str, Sequence[LoraAdapter]], scaling: float = 1.0) -> Dict[str, List[float]]:
    return {lid: selection_fractions([delta(a, scaling) for a in group]) for lid, group in adapters.items() if group}


__all__ = [
    "MergePolicy",
    "MergeStrategy",
    "merge_checksum",
    "merge_fold",
    "merge_history",
    "merge_pair",
    "merged_weights",
    "per_layer_selection",
    "selection_fractions",
    "time_merge_fold",
]
