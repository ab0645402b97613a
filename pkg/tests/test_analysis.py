from __future__ import annotations

import numpy as np
import pytest

from src.analysis.shift import average_pool, run_histograms, shift_histogram
from src.analysis.signs import eval_subset, pooled_fractions, sign_split, sign_subset_sweep, sign_tolerance
from src.analysis.similarity import frob_similarity, similarity_trace
from src.analysis.taylor import (
    estimate_lambda_max,
    perturbation_study,
    power_iteration,
    readout_objective,
    taylor_bound_check,
)
from src.lora.model import ContinualModel, compose_weight
from src.nn.tape import Matrix
from src.shared.errors import ConvergenceError, MetricError, ShapeError
from src.training.evaluation import evaluate
from src.training.trainer import run_sequence


# sign agreement


def test_sign_split_hand_example() -> None:
    split = sign_split(Matrix([[0.5, -0.3, 0.1]]), Matrix([[1, 1, -1]]), 100)
    assert split.same_fraction == pytest.approx(1 / 3)
    assert split.opposite_fraction == pytest.approx(2 / 3)


def test_sign_split_keeps_smallest_magnitudes() -> None:
    split = sign_split(Matrix([[0.5, -0.3, 0.1]]), Matrix([[1, 1, -1]]), 40)
    np.testing.assert_array_equal(split.selected_mask, [[False, True, True]])
    assert split.opposite_fraction == 1.0


def test_sign_split_zero_history_is_in_neither_class(rng) -> None:
    split = sign_split(Matrix(rng.normal(size=(3, 3))), Matrix.zeros(3, 3), 100)
    assert split.same_fraction == 0.0
    assert split.opposite_fraction == 0.0


def test_sign_split_matches_per_entry_loop_and_ignores_scale(rng) -> None:
    update = Matrix(rng.normal(size=(10, 10)))
    history = Matrix(rng.normal(size=(10, 10)))
    split = sign_split(update, history, 100)
    for i, j in np.ndindex(10, 10):
        product = update.data[i, j] * history.data[i, j]
        assert split.same_mask[i, j] == (product > 0)
        assert split.opposite_mask[i, j] == (product < 0)
    rescaled = sign_split(Matrix(update.data * 3.0), Matrix(history.data * 0.25), 100)
    assert rescaled.same_fraction == split.same_fraction
    assert rescaled.opposite_fraction == split.opposite_fraction


def test_sign_split_counts_only_decided_signs() -> None:
    tol = sign_tolerance(10.0)
    assert tol == pytest.approx(0.0549, abs=1e-4)
    update = Matrix([[0.5, -0.3, 0.01, 0.2]])
    history = Matrix([[1.0, 1.0, -1.0, -0.02]])
    decided = sign_split(update, history, 100, tol=tol)
    assert decided.same_fraction == pytest.approx(1 / 4)
    assert decided.opposite_fraction == pytest.approx(1 / 4)
    raw = sign_split(update, history, 100)
    assert raw.opposite_fraction == pytest.approx(3 / 4)
    with pytest.raises(ValueError):
        sign_tolerance(0.0)


def test_sign_split_errors() -> None:
    with pytest.raises(ShapeError):
        sign_split(Matrix.zeros(2, 2), Matrix.zeros(2, 3), 50)
    with pytest.raises(ValueError):
        sign_split(Matrix.zeros(2, 2), Matrix.zeros(2, 2), 0)


def test_pooled_fractions_weight_layers_by_entry_count() -> None:
    splits = {
        "fc1": sign_split(Matrix([[1.0, 1.0, 1.0]]), Matrix([[1.0, 1.0, 1.0]]), 100),
        "fc2": sign_split(Matrix([[1.0]]), Matrix([[-1.0]]), 100),
    }
    assert pooled_fractions(splits) == (0.75, 0.25)


def _two_task_model(tiny_base, rng) -> ContinualModel:
    model = ContinualModel(tiny_base)
    model.begin_task(1, rank=2, seed=0)
    model.commit({lid: a.with_factors(a.A, Matrix(rng.normal(size=a.B.shape))) for lid, a in model.active.items()})
    model.begin_task(2, rank=2, seed=0)
    model.set_active({lid: a.with_factors(a.A, Matrix(rng.normal(size=a.B.shape))) for lid, a in model.active.items()})
    return model


def test_eval_subset_full_mask_matches_unmasked_model(tiny_base, tiny_sequence, rng) -> None:
    model = _two_task_model(tiny_base, rng)
    frozen = {lid: model.history(lid) for lid in model.injected}
    update = {lid: model.active_delta(lid) for lid in model.injected}
    splits = {lid: sign_split(update[lid], frozen[lid], 100) for lid in model.injected}
    got = eval_subset(tiny_base, frozen, update, splits, "both", tiny_sequence.tasks)
    expected = sum(evaluate(model, d) for d in tiny_sequence) / len(tiny_sequence)
    assert got == expected


def test_eval_subset_empty_mask_drops_the_update(tiny_base, tiny_sequence, rng) -> None:
    model = _two_task_model(tiny_base, rng)
    frozen = {lid: model.history(lid) for lid in model.injected}
    update = {lid: model.active_delta(lid) for lid in model.injected}
    splits = {lid: sign_split(update[lid], Matrix.zeros(*update[lid].shape), 100) for lid in model.injected}
    got = eval_subset(tiny_base, frozen, update, splits, "opposite", tiny_sequence.tasks[:1])
    weights = [(compose_weight(layer.weight, frozen[layer.layer_id]), layer.bias) for layer in tiny_base.layers]
    assert got == evaluate(weights, tiny_sequence[0])


def test_sign_subset_sweep_rows(tiny_base, tiny_sequence, rng) -> None:
    model = _two_task_model(tiny_base, rng)
    frozen = {lid: model.history(lid) for lid in model.injected}
    update = {lid: model.active_delta(lid) for lid in model.injected}
    rows = sign_subset_sweep(tiny_base, frozen, update, tiny_sequence.tasks[:2], ks=(50.0, 100.0))
    assert [(r["k"], r["variant"]) for r in rows] == [
        (50.0, "same"),
        (50.0, "opposite"),
        (50.0, "both"),
        (100.0, "same"),
        (100.0, "opposite"),
        (100.0, "both"),
    ]
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)


# shift histograms


def test_shift_histogram_selects_top_magnitudes() -> None:
    hist = shift_histogram(Matrix([[0.9, -0.8, 0.1, 0.05]]), top_fraction=0.5, pool_window=1)
    np.testing.assert_allclose(sorted(hist.selected), [-0.8, 0.9], rtol=1e-6)
    assert hist.counts.sum() == 2
    assert len(hist.counts) == 41


def test_shift_histogram_full_selection_counts_every_entry(rng) -> None:
    hist = shift_histogram(Matrix(rng.normal(size=(5, 6))), top_fraction=1.0, pool_window=1)
    assert hist.counts.sum() == 30
    assert len(hist.rows()) == 41


def test_shift_histogram_constant_matrix_pools_to_one_bin() -> None:
    hist = shift_histogram(Matrix(np.full((4, 4), 0.3)), top_fraction=1.0, pool_window=2)
    assert hist.selected.size == 4
    np.testing.assert_allclose(hist.selected, 0.3, rtol=1e-6)
    assert np.count_nonzero(hist.counts) == 1


def test_average_pool_truncates_edge_cells() -> None:
    values = np.arange(9, dtype=float).reshape(3, 3)
    np.testing.assert_allclose(average_pool(values, 2), [[2.0, 3.5], [6.5, 8.0]])
    np.testing.assert_allclose(average_pool(values, 4), [[4.0]])


def test_average_pool_collapses_a_narrow_axis(rng) -> None:
    values = rng.normal(size=(32, 3))
    pooled = average_pool(values, 4)
    assert pooled.shape == (8, 1)
    np.testing.assert_allclose(pooled[:, 0], values.reshape(8, 12).mean(axis=1))

    histograms = run_histograms([Matrix(values), Matrix(2.0 * values)], top_fraction=0.2, pool_window=4)
    assert [int(h.counts.sum()) for h in histograms] == [2, 2]


def test_run_histograms_share_bin_edges(rng) -> None:
    stages = [Matrix(rng.normal(scale=s, size=(4, 4))) for s in (0.1, 1.0, 3.0)]
    histograms = run_histograms(stages, top_fraction=0.5, pool_window=1)
    assert [h.task_index for h in histograms] == [1, 2, 3]
    for h in histograms[1:]:
        np.testing.assert_array_equal(h.bin_edges, histograms[0].bin_edges)
    assert histograms[0].bin_edges[-1] == pytest.approx(np.abs(stages[-1].data).max())


# similarity


def test_frob_similarity_cases(rng) -> None:
    a = Matrix(rng.normal(size=(3, 4)))
    b = Matrix(rng.normal(size=(3, 4)))
    assert frob_similarity(a, a) == pytest.approx(1.0)
    assert frob_similarity(a, Matrix(-a.data)) == pytest.approx(-1.0)
    assert frob_similarity(Matrix([[1, 0]]), Matrix([[0, 1]])) == 0.0
    assert frob_similarity(a, b) == pytest.approx(frob_similarity(b, a))
    assert frob_similarity(Matrix(a.data * 5.0), b) == pytest.approx(frob_similarity(a, b), rel=1e-6)
    with pytest.raises(MetricError):
        frob_similarity(a, Matrix.zeros(3, 4))
    with pytest.raises(ShapeError):
        frob_similarity(a, Matrix.zeros(4, 3))


def test_similarity_trace_reports_undefined_as_none() -> None:
    first = Matrix([[1.0, 0.0]])
    rows = similarity_trace([first, Matrix([[0.0, 2.0]]), Matrix.zeros(1, 2)], merged=[first, first, first])
    assert rows[0] == {"task": 1, "delta_vs_first": 1.0, "merged_vs_first": 1.0}
    assert rows[1]["delta_vs_first"] == 0.0
    assert rows[2]["delta_vs_first"] is None


# second-order bound


def _quadratic(q: np.ndarray, b: np.ndarray):
    def loss(theta: np.ndarray) -> float:
        return float(0.5 * theta @ q @ theta + b @ theta)

    def grad(theta: np.ndarray) -> np.ndarray:
        return q @ theta + b

    return loss, grad


def test_taylor_bound_on_diagonal_quadratic() -> None:
    loss, _ = _quadratic(np.diag([1.0, 4.0]), np.zeros(2))
    check = taylor_bound_check(loss, np.zeros(2), np.ones(2))
    assert check.delta_loss == pytest.approx(2.5)
    assert check.lambda_max == pytest.approx(4.0, rel=1e-4)
    assert check.bound == pytest.approx(4.0, rel=1e-4)
    assert check.holds

    same = taylor_bound_check(loss, np.zeros(2), np.zeros(2), lambda_max=4.0)
    assert same.delta_loss == 0.0 and same.bound == 0.0 and same.holds


def test_taylor_bound_holds_for_random_convex_quadratics() -> None:
    gen = np.random.default_rng(77)
    for _ in range(5):
        m = gen.normal(size=(5, 5))
        q = m.T @ m + 0.5 * np.eye(5)
        b = gen.normal(size=5)
        loss, grad = _quadratic(q, b)
        theta_star = -np.linalg.solve(q, b)
        lam = estimate_lambda_max(loss, theta_star, grad=grad)
        assert lam == pytest.approx(np.linalg.eigvalsh(q)[-1], rel=1e-3)
        top = np.linalg.eigh(q)[1][:, -1]
        for direction in [top] + [gen.normal(size=5) for _ in range(10)]:
            check = taylor_bound_check(loss, theta_star, theta_star + 0.3 * direction, lambda_max=lam)
            assert check.holds


def test_lambda_max_handles_negative_dominant_eigenvalue() -> None:
    h = np.diag([-5.0, 1.0])
    assert estimate_lambda_max(lambda t: 0.0, np.zeros(2), grad=lambda t: h @ t) == pytest.approx(1.0, rel=1e-4)


def test_power_iteration_reports_non_convergence() -> None:
    noise = np.random.default_rng(0)
    with pytest.raises(ConvergenceError):
        power_iteration(lambda v: noise.normal(size=2), 2, max_iter=20)


def test_readout_objective_bound_holds_for_small_perturbations(tiny_base, tiny_sequence, tiny_train_config) -> None:
    artifacts = run_sequence(tiny_sequence, tiny_train_config, tiny_base)
    model = ContinualModel(tiny_base)
    for t in range(len(tiny_sequence)):
        model.commit({lid: group[t] for lid, group in artifacts.adapters.items()})
    objective = readout_objective(model.effective_weights(), tiny_sequence[len(tiny_sequence) - 1])
    assert np.linalg.norm(objective.grad(objective.theta_star)) < 1e-9

    theta = objective.theta_star
    step = 1e-6
    numeric = np.stack(
        [
            (objective.grad(theta + step * e) - objective.grad(theta - step * e)) / (2 * step)
            for e in np.eye(theta.size)
        ],
        axis=1,
    )
    np.testing.assert_allclose(objective.hessian(theta), numeric, atol=1e-6)

    checks = perturbation_study(objective, n_directions=100, radius=1e-2, seed=3)
    assert len(checks) == 100
    assert all(c.distance <= 1e-2 for c in checks)
    assert sum(c.holds for c in checks) >= 95
