"""Histograms of the accumulated weight shift."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.nn.tape import Matrix

LOGGER = logging.getLogger(__name__)

N_BINS = 41


@dataclass(frozen=True)
class ShiftHistogram:
    task_index: int
    selection_fraction: float
    bin_edges: np.ndarray
    counts: np.ndarray
    selected: np.ndarray

    def rows(self) -> List[Dict[str, float]]:
        return [
            {"bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)}
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)
        ]


def average_pool(values: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping window x window means; edge cells average what is present.

    A window wider than the matrix collapses that axis into one partial cell.
    """
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    if window == 1:
        return values.astype(np.float64)
    rows, cols = values.shape
    out_r, out_c = math.ceil(rows / window), math.ceil(cols / window)
    pooled = np.empty((out_r, out_c))
    for i in range(out_r):
        for j in range(out_c):
            block = values[i * window : (i + 1) * window, j * window : (j + 1) * window]
            pooled[i, j] = block.astype(np.float64).mean()
    return pooled


def top_by_magnitude(values: np.ndarray, fraction: float) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError(f"top fraction must lie in (0, 1], got {fraction}")
    flat = values.reshape(-1)
    keep = max(1, int(math.ceil(fraction * flat.size - 1e-9)))
    order = np.argsort(-np.abs(flat), kind="stable")
    return flat[order[:keep]]


def symmetric_edges(limit: float, n_bins: int = N_BINS) -> np.ndarray:
    if limit <= 0:
        LOGGER.warning("shift histogram has no spread; using [-1, 1]")
        limit = 1.0
    return np.linspace(-limit, limit, n_bins + 1)


def shift_histogram(
    cum_delta: Matrix,
    top_fraction: float = 0.2,
    pool_window: int = 4,
    task_index: int = 0,
    limit: Optional[float] = None,
) -> ShiftHistogram:
    """Pool, keep the top fraction by |value|, bin over [-limit, limit]."""
    pooled = average_pool(cum_delta.data, pool_window)
    selected = top_by_magnitude(pooled, top_fraction)
    edges = symmetric_edges(float(np.max(np.abs(pooled))) if limit is None else limit)
    counts, _ = np.histogram(selected, bins=edges)
    return ShiftHistogram(
        task_index=task_index,
        selection_fraction=top_fraction,
        bin_edges=edges,
        counts=counts,
        selected=selected,
    )


def run_histograms(
    cum_deltas: Sequence[Matrix],
    top_fraction: float = 0.2,
    pool_window: int = 4,
) -> List[ShiftHistogram]:
    """One histogram per stage, all on the same bin edges."""
    limit = max(float(np.max(np.abs(average_pool(c.data, pool_window)))) for c in cum_deltas)
    return [
        shift_histogram(c, top_fraction, pool_window, task_index=t, limit=limit)
        for t, c in enumerate(cum_deltas, start=1)
    ]


__all__ = ["N_BINS", "ShiftHistogram", "average_pool", "run_histograms", "shift_histogram", "symmetric_edges", "top_by_magnitude"]
