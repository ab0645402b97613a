from __future__ import annotations

import numpy as np
import pytest

from src.metrics.continual import AccuracyMatrix, aaa, bwt, final_acc, fr, fwt, seed_std, summarize
from src.shared.errors import MetricError


def _matrix(rows, sizes=None, scratch=None, pre_task=None) -> AccuracyMatrix:
    """Build from a list of rows where ``rows[i-1][j-1]`` is a(i, j) for j >= i."""
    n = len(rows)
    entries = {(i, j): rows[i - 1][j - 1] for i in range(1, n + 1) for j in range(i, n + 1)}
    m = AccuracyMatrix(n_tasks=n, sizes=sizes or [1] * n, entries=entries, scratch=scratch)
    for i, value in (pre_task or {}).items():
        m.set_pre_task(i, value)
    return m


def test_final_acc_weighting() -> None:
    assert final_acc(_matrix([[0.0, 0.8], [0.0, 0.6]], sizes=[100, 300])) == pytest.approx(0.65)
    assert final_acc(_matrix([[0.0, 0.8], [0.0, 0.6]])) == pytest.approx(0.7)
    assert final_acc(_matrix([[0.42]])) == 0.42


def test_bwt_cases() -> None:
    assert bwt(_matrix([[0.9, 0.8], [0, 0.7]])) == pytest.approx(-0.1)
    assert bwt(_matrix([[0.9, 0.9], [0, 0.8]])) == 0.0
    three = _matrix([[0.9, 0.85, 0.7], [0, 0.8, 0.8], [0, 0, 0.6]])
    assert bwt(three) == pytest.approx(-0.1)
    with pytest.raises(MetricError):
        bwt(_matrix([[0.5]]))


def test_fwt_cases() -> None:
    m = _matrix([[0.9, 0.8], [0, 0.7]], scratch=[0.9, 0.6], pre_task={2: 0.5})
    assert fwt(m) == pytest.approx(-0.1)
    same = _matrix([[0.9, 0.8], [0, 0.7]], scratch=[0.9, 0.5], pre_task={2: 0.5})
    assert fwt(same) == 0.0
    three = _matrix(
        [[0.9, 0.8, 0.7], [0, 0.8, 0.8], [0, 0, 0.6]],
        scratch=[0.9, 0.7, 0.5],
        pre_task={2: 0.6, 3: 0.6},
    )
    assert fwt(three) == pytest.approx(((0.6 - 0.7) + (0.6 - 0.5)) / 2)
    with pytest.raises(MetricError):
        fwt(_matrix([[0.9, 0.8], [0, 0.7]], pre_task={2: 0.5}))
    with pytest.raises(MetricError):
        fwt(_matrix([[0.9, 0.8], [0, 0.7]], scratch=[0.9, 0.6]))


def test_fr_cases() -> None:
    assert fr(_matrix([[0.9, 0.7], [0, 0.8]])) == pytest.approx(0.2)
    assert fr(_matrix([[0.5, 0.6, 0.7], [0, 0.6, 0.6], [0, 0, 0.9]])) == 0.0
    interior = _matrix([[0.6, 0.9, 0.5], [0, 0.8, 0.8], [0, 0, 0.9]])
    assert fr(interior) == pytest.approx(0.4 / 2)
    # the literal reading only looks at the diagonal
    assert fr(interior, literal=True) == pytest.approx(0.1 / 2)
    assert fr(interior, literal=True) == pytest.approx(-bwt(interior))


def test_aaa_cases() -> None:
    assert aaa(_matrix([[0.7]])) == 0.7
    assert aaa(_matrix([[0.9, 0.8], [0, 0.8]])) == pytest.approx(0.85)
    assert aaa(_matrix([[0.4] * 3, [0, 0.4, 0.4], [0, 0, 0.4]])) == pytest.approx(0.4)


def test_incomplete_matrix_is_rejected() -> None:
    m = AccuracyMatrix(n_tasks=2, sizes=[1, 1])
    m.set(1, 1, 0.9)
    assert not m.complete
    with pytest.raises(MetricError):
        aaa(m)
    with pytest.raises(MetricError):
        final_acc(m)


def test_entries_are_validated() -> None:
    m = AccuracyMatrix(n_tasks=2, sizes=[1, 1])
    with pytest.raises(MetricError):
        m.set(2, 1, 0.5)
    with pytest.raises(MetricError):
        m.set(1, 1, 1.5)
    with pytest.raises(MetricError):
        AccuracyMatrix(n_tasks=2, sizes=[1])
    with pytest.raises(MetricError):
        AccuracyMatrix(n_tasks=0, sizes=[])


def test_metrics_match_brute_force_on_random_matrices() -> None:
    gen = np.random.default_rng(2024)
    for _ in range(50):
        n = int(gen.integers(2, 7))
        full = gen.uniform(size=(n, n))
        sizes = [int(s) for s in gen.integers(1, 500, size=n)]
        m = _matrix(full.tolist(), sizes=sizes)

        acc = sum(sizes[i] * full[i, n - 1] for i in range(n)) / sum(sizes)
        back = sum(full[i, n - 1] - full[i, i] for i in range(n - 1)) / (n - 1)
        forget = sum(max(full[i, i:]) - full[i, n - 1] for i in range(n - 1)) / (n - 1)
        average = sum(sum(full[i, j] for i in range(j + 1)) / (j + 1) for j in range(n)) / n

        assert final_acc(m) == pytest.approx(acc)
        assert bwt(m) == pytest.approx(back)
        assert fr(m) == pytest.approx(forget)
        assert fr(m) >= 0.0
        assert aaa(m) == pytest.approx(average)


def test_seed_std() -> None:
    assert seed_std([0.5]) == 0.0
    assert seed_std([1.0, 3.0]) == pytest.approx(np.std([1.0, 3.0], ddof=1))
    with pytest.raises(MetricError):
        seed_std([])


def test_summarize_marks_undefined_metrics() -> None:
    single = summarize(_matrix([[0.8]]))
    assert single == {"acc": 0.8, "bwt": None, "fwt": None, "fr": None, "aaa": 0.8}
    pair = summarize(_matrix([[0.9, 0.7], [0, 0.8]], scratch=[0.9, 0.6], pre_task={2: 0.5}))
    assert pair["fwt"] == pytest.approx(-0.1)
    assert pair["fr"] == pytest.approx(0.2)


def test_dict_round_trip_keeps_every_field() -> None:
    m = _matrix([[0.9, 0.7], [0, 0.8]], sizes=[10, 20], scratch=[0.9, 0.6], pre_task={1: 0.3, 2: 0.5})
    payload = m.to_dict()
    assert [(e["i"], e["j"]) for e in payload["entries"]] == [(1, 1), (1, 2), (2, 2)]
    restored = AccuracyMatrix.from_dict({**payload, "comment": "ignored"})
    assert restored.to_dict() == payload
    with pytest.raises(MetricError):
        AccuracyMatrix.from_dict({"n_tasks": 2})
