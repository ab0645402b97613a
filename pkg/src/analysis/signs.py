"""Sign agreement between a task's update and the accumulated history."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Sequence, Tuple

import numpy as np

from src.data.synthetic import TaskDataset
from src.lora.model import BaseModel, WeightPair, compose_weight
from src.nn.tape import Matrix
from src.shared.errors import ShapeError
from src.training.evaluation import evaluate

LOGGER = logging.getLogger(__name__)

SubsetVariant = Literal["same", "opposite", "both"]
SWEEP_K = (20.0, 40.0, 60.0, 80.0, 100.0)


@dataclass(frozen=True)
class SignSplit:
    """Bottom-k% selection of an update split by sign agreement with the history.

    Entries whose product with the history is zero belong to neither mask, so
    the two fractions may sum to less than one.
    """

    k_percent: float
    selected_mask: np.ndarray
    same_mask: np.ndarray
    opposite_mask: np.ndarray

    @property
    def n_selected(self) -> int:
        return int(self.selected_mask.sum())

    @property
    def n_same(self) -> int:
        return int(self.same_mask.sum())

    @property
    def n_opposite(self) -> int:
        return int(self.opposite_mask.sum())

    @property
    def same_fraction(self) -> float:
        return self.n_same / self.n_selected

    @property
    def opposite_fraction(self) -> float:
        return self.n_opposite / self.n_selected

    def mask(self, variant: SubsetVariant) -> np.ndarray:
        if variant == "same":
            return self.same_mask
        if variant == "opposite":
            return self.opposite_mask
        return self.selected_mask


def sign_tolerance(alpha: float) -> float:
    """Magnitude below which tanh(alpha * x) has not yet committed to a sign (|tanh| < 1/2)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return math.atanh(0.5) / alpha


def _decided_sign(values: np.ndarray, tol: float) -> np.ndarray:
    return np.where(np.abs(values) > tol, np.sign(values), 0.0)


def sign_split(delta_t: Matrix, cum_prev: Matrix, k_percent: float, tol: float = 0.0) -> SignSplit:
    """Select the k% smallest-|delta| entries and classify them by sign product.

    With ``tol > 0`` an entry of either operand whose magnitude is at most
    ``tol`` has no sign, so its product is zero.
    """
    if delta_t.shape != cum_prev.shape:
        raise ShapeError("sign_split", delta_t.shape, cum_prev.shape)
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must lie in (0, 100], got {k_percent}")
    values = delta_t.data.reshape(-1)
    keep = max(1, int(math.ceil(k_percent / 100.0 * values.size - 1e-9)))
    order = np.argsort(np.abs(values), kind="stable")
    selected = np.zeros(values.size, dtype=bool)
    selected[order[:keep]] = True
    selected = selected.reshape(delta_t.shape)
    product = _decided_sign(delta_t.data, tol) * _decided_sign(cum_prev.data, tol)
    return SignSplit(
        k_percent=float(k_percent),
        selected_mask=selected,
        same_mask=selected & (product > 0),
        opposite_mask=selected & (product < 0),
    )


def pooled_fractions(splits: Mapping[str, SignSplit]) -> Tuple[float, float]:
    """(same, opposite) over every layer's selected entries taken together."""
    selected = sum(s.n_selected for s in splits.values())
    if selected == 0:
        return 0.0, 0.0
    return (
        sum(s.n_same for s in splits.values()) / selected,
        sum(s.n_opposite for s in splits.values()) / selected,
    )


def subset_weights(
    base: BaseModel,
    frozen_cum: Mapping[str, Matrix],
    delta_t: Mapping[str, Matrix],
    splits: Mapping[str, SignSplit],
    variant: SubsetVariant,
) -> List[WeightPair]:
    pairs: List[WeightPair] = []
    for layer in base.layers:
        lid = layer.layer_id
        if lid not in delta_t:
            pairs.append((layer.weight, layer.bias))
            continue
        mask = splits[lid].mask(variant)
        if mask.shape != delta_t[lid].shape:
            raise ShapeError("eval_subset", mask.shape, delta_t[lid].shape, detail="mask must match the update")
        masked = Matrix(np.where(mask, delta_t[lid].data, 0.0))
        pairs.append((compose_weight(layer.weight, frozen_cum[lid], masked), layer.bias))
    return pairs


def eval_subset(
    base: BaseModel,
    frozen_cum: Mapping[str, Matrix],
    delta_t: Mapping[str, Matrix],
    splits: Mapping[str, SignSplit],
    variant: SubsetVariant,
    datasets: Sequence[TaskDataset],
    threads: int = 1,
) -> float:
    """Mean accuracy over ``datasets`` with only the chosen subset of each update applied."""
    weights = subset_weights(base, frozen_cum, delta_t, splits, variant)
    scores = [evaluate(weights, dataset, threads=threads) for dataset in datasets]
    return sum(scores) / len(scores)


def sign_subset_sweep(
    base: BaseModel,
    frozen_cum: Mapping[str, Matrix],
    delta_t: Mapping[str, Matrix],
    datasets: Sequence[TaskDataset],
    ks: Sequence[float] = SWEEP_K,
    threads: int = 1,
) -> List[Dict[str, float]]:
    rows = []
    for k in ks:
        splits = {lid: sign_split(delta_t[lid], frozen_cum[lid], k) for lid in delta_t}
        same, opposite = pooled_fractions(splits)
        for variant in ("same", "opposite", "both"):
            acc = eval_subset(base, frozen_cum, delta_t, splits, variant, datasets, threads)
            rows.append(
                {"k": k, "variant": variant, "accuracy": acc, "same_fraction": same, "opposite_fraction": opposite}
            )
        LOGGER.debug("sign sweep k=%s same=%.4f opposite=%.4f", k, same, opposite)
    return rows


__all__ = [
    "SWEEP_K",
    "SignSplit",
    "SubsetVariant",
    "eval_subset",
    "pooled_fractions",
    "sign_split",
    "sign_subset_sweep",
    "sign_tolerance",
    "subset_weights",
]
