from __future__ import annotations

import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from src.lora.adapter import LoraAdapter
from src.lora.model import BaseModel, DenseLayer
from src.merging.merge import (
    MergePolicy,
    merge_checksum,
    merge_fold,
    merge_pair,
    merged_weights,
    per_layer_selection,
    selection_fractions,
    time_merge_fold,
)
from src.nn.tape import Matrix
from src.shared.errors import ConfigError, ShapeError

MAGNITUDE = MergePolicy()
AVERAGE = MergePolicy(strategy="average")


def _row(*values: float) -> Matrix:
    return Matrix([list(values)])


def test_merge_pair_hand_example() -> None:
    merged = merge_pair(Matrix([[1, -2], [3, 0]]), Matrix([[-4, 1], [2, 5]]))
    np.testing.assert_array_equal(merged.data, [[-4, -2], [3, 5]])


def test_merge_pair_tie_keeps_left_operand() -> None:
    np.testing.assert_array_equal(merge_pair(_row(2, -1), _row(-2, 1)).data, [[2, -1]])
    with pytest.raises(ShapeError):
        merge_pair(Matrix.zeros(2, 2), Matrix.zeros(2, 1))


def test_merge_pair_exhaustive_small_grid() -> None:
    values = (-1.0, 0.0, 1.0)
    for x, y, z, w in itertools.product(values, repeat=4):
        a, b = _row(x, y), _row(z, w)
        merged = merge_pair(a, b).data
        # result is always one of the two inputs, entry by entry, with the larger magnitude
        for got, left, right in zip(merged[0], (x, y), (z, w)):
            assert got in (left, right)
            assert abs(got) == max(abs(left), abs(right))
        # idempotent
        np.testing.assert_array_equal(merge_pair(a, a).data, a.data)
        # magnitudes are symmetric even though signs prefer the left on ties
        np.testing.assert_array_equal(np.abs(merged), np.abs(merge_pair(b, a).data))


def test_merge_fold_magnitude_chain_and_singleton() -> None:
    assert merge_fold([_row(1), _row(-3), _row(2)], MAGNITUDE).item() == -3.0
    only = _row(0.5, -0.25)
    for strategy in ("magnitude_max", "average", "ties"):
        assert merge_fold([only], MergePolicy(strategy=strategy)) is only


def test_merge_fold_errors() -> None:
    with pytest.raises(ValueError):
        merge_fold([], MAGNITUDE)
    with pytest.raises(ShapeError):
        merge_fold([Matrix.zeros(2, 2), Matrix.zeros(3, 2)], MAGNITUDE)


def test_merge_fold_ties_hand_example() -> None:
    policy = MergePolicy(strategy="ties", ties_trim_fraction=2 / 3)
    merged = merge_fold([_row(1, -3, 0.1), _row(2, 3, -0.1)], policy)
    np.testing.assert_allclose(merged.data, [[1.5, -3.0, 0.0]])


def test_merge_fold_ties_without_trim_elects_majority_mass() -> None:
    policy = MergePolicy(strategy="ties", ties_trim_fraction=1.0)
    merged = merge_fold([_row(1.0, -1.0), _row(2.0, 0.5), _row(-4.0, 0.5)], policy)
    # entry 0: +3 vs -4 elects minus; entry 1: +1 vs -1 ties to the first operand's minus
    np.testing.assert_allclose(merged.data, [[-4.0, -1.0]])


def test_merge_fold_average_matches_numpy(rng) -> None:
    deltas = [rng.normal(size=(3, 4)) for _ in range(5)]
    merged = merge_fold([Matrix(d) for d in deltas], AVERAGE)
    np.testing.assert_allclose(merged.data, np.mean([Matrix(d).data for d in deltas], axis=0), rtol=1e-6)


def test_merge_fold_magnitude_matches_per_entry_oracle(rng) -> None:
    deltas = [Matrix(rng.normal(size=(4, 3))) for _ in range(4)]
    merged = merge_fold(deltas, MAGNITUDE).data
    stack = np.stack([d.data for d in deltas])
    for i, j in np.ndindex(4, 3):
        best = stack[0, i, j]
        for value in stack[1:, i, j]:
            if abs(value) > abs(best):
                best = value
        assert merged[i, j] == best


def test_selection_fractions_sum_to_one(rng) -> None:
    deltas = [Matrix(rng.normal(size=(5, 5))) for _ in range(3)]
    fractions = selection_fractions(deltas)
    assert len(fractions) == 3
    assert sum(fractions) == pytest.approx(1.0)
    assert selection_fractions([_row(1, -3), _row(2, 0)]) == [0.5, 0.5]


def _base() -> BaseModel:
    return BaseModel(
        layers=(
            DenseLayer("fc1", Matrix.identity(2), Matrix.zeros(1, 2)),
            DenseLayer("fc2", Matrix([[1.0], [1.0]]), Matrix.zeros(1, 1)),
        )
    )


def _adapter(task_index: int, layer_id: str, a, b) -> LoraAdapter:
    return LoraAdapter(task_index=task_index, layer_id=layer_id, A=Matrix(a), B=Matrix(b))


def test_merged_weights_single_task_and_zero_deltas() -> None:
    one = {"fc1": [_adapter(1, "fc1", [[1], [0]], [[2, 3]])]}
    pairs = merged_weights(_base(), one, MAGNITUDE, injected=["fc1"])
    np.testing.assert_array_equal(pairs[0][0].data, [[3, 3], [0, 1]])
    np.testing.assert_array_equal(pairs[1][0].data, [[1], [1]])

    zeros = {"fc1": [_adapter(t, "fc1", [[1], [1]], [[0, 0]]) for t in (1, 2)]}
    for strategy in ("magnitude_max", "average", "ties"):
        pairs = merged_weights(_base(), zeros, MergePolicy(strategy=strategy), injected=["fc1"])
        np.testing.assert_array_equal(pairs[0][0].data, np.eye(2))


def test_merged_weights_two_task_hand_example() -> None:
    # rank-2 factors with A = I reproduce the merge_pair example
    adapters = {
        "fc1": [
            _adapter(1, "fc1", np.eye(2), [[1, -2], [3, 0]]),
            _adapter(2, "fc1", np.eye(2), [[-4, 1], [2, 5]]),
        ]
    }
    pairs = merged_weights(_base(), adapters, MAGNITUDE, injected=["fc1"])
    np.testing.assert_array_equal(pairs[0][0].data, np.eye(2) + np.array([[-4, -2], [3, 5]]))


def test_merged_weights_missing_layer() -> None:
    with pytest.raises(ConfigError) as excinfo:
        merged_weights(_base(), {"fc1": []}, MAGNITUDE)
    assert excinfo.value.missing == ["fc2"]


def test_per_layer_selection_and_checksum_are_stable() -> None:
    adapters = {"fc1": [_adapter(1, "fc1", np.eye(2), [[1, -2], [3, 0]]), _adapter(2, "fc1", np.eye(2), [[-4, 1], [2, 5]])]}
    assert per_layer_selection(adapters) == {"fc1": [0.5, 0.5]}
    weights = [Matrix([[1.0, 2.0]])]
    assert merge_checksum(weights) == merge_checksum([Matrix([[1.0, 2.0]])])
    assert merge_checksum(weights) != merge_checksum([Matrix([[2.0, 1.0]])])


def test_merge_policy_validation() -> None:
    with pytest.raises(ValidationError):
        MergePolicy(strategy="median")
    with pytest.raises(ValidationError):
        MergePolicy(ties_trim_fraction=0.0)


def test_merge_fold_cost_grows_linearly_with_task_count() -> None:
    eight = time_merge_fold(8, (512, 512), repeats=7)
    sixteen = time_merge_fold(16, (512, 512), repeats=7)
    # doubling t should double the cost, give or take half
    assert 1.0 <= sixteen / eight <= 3.0
