"""Frobenius cosine between weight updates."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from src.nn.tape import Matrix
from src.shared.errors import MetricError, ShapeError


def frob_similarity(a: Matrix, b: Matrix) -> float:
    """Tr(a^T b) / (||a||_F ||b||_F)."""
    if a.shape != b.shape:
        raise ShapeError("frob_similarity", a.shape, b.shape)
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise MetricError("similarity with a zero matrix is undefined")
    return float(np.clip(np.sum(x * y) / (nx * ny), -1.0, 1.0))


def _safe(a: Matrix, b: Matrix) -> Optional[float]:
    try:
        return frob_similarity(a, b)
    except MetricError:
        return None


def similarity_trace(deltas: Sequence[Matrix], merged: Optional[Sequence[Matrix]] = None) -> List[Dict[str, Optional[float]]]:
    """Cosine of each task's update (and running merge, if given) against the first update."""
    rows = []
    for t, d in enumerate(deltas, start=1):
        row: Dict[str, Optional[float]] = {"task": t, "delta_vs_first": _safe(d, deltas[0])}
        if merged is not None:
            row["merged_vs_first"] = _safe(merged[t - 1], deltas[0])
        rows.append(row)
    return rows


__all__ = ["frob_similarity", "similarity_trace"]
