"""Sequential adapter training over a task sequence.

For each task a fresh adapter is attached to every injected layer, optimized on
``L_f + lambda * L_s`` against the frozen history, then frozen. After each task
every seen task is re-evaluated to fill one column of the accuracy matrix.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from src.analysis.signs import SignSplit, pooled_fractions, sign_split, sign_tolerance
from src.data.synthetic import TaskDataset, TaskSequence, minibatches
from src.lora.adapter import LoraAdapter, delta, refactor_delta
from src.lora.model import BaseModel as FrozenBase
from src.lora.model import ContinualModel, forward, sum_history
from src.merging.merge import MergePolicy, merge_history, merged_weights
from src.metrics.continual import AccuracyMatrix
from src.nn.optim import build_optimizer
from src.nn.tape import Matrix, Tape, add, grad, softmax_xent
from src.shared.errors import NonFiniteLossError
from src.training.evaluation import evaluate
from src.training.regularizers import RegularizerConfig, orth_loss, ps_loss, total_loss

LOGGER = logging.getLogger(__name__)

CONVERGENCE_MARKS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs_per_task: int = Field(default=5, ge=0)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-2, gt=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    seed: int = 0
    reg: RegularizerConfig = RegularizerConfig()
    rank: int = Field(default=4, ge=1)
    scaling: float = Field(default=1.0, gt=0)
    injected: Optional[List[str]] = None
    sign_mask_baseline: bool = False
    merge: MergePolicy = MergePolicy()
    merge_cadence: Literal["final", "per-task"] = "final"
    compute_scratch: bool = False
    threads: int = Field(default=1, ge=1)
    progress: bool = False


@dataclass
class LossTrace:
    task_index: int
    total: List[float] = field(default_factory=list)
    fidelity: List[float] = field(default_factory=list)
    stability: List[float] = field(default_factory=list)

    def append(self, total: float, fidelity: float, stability: float) -> None:
        self.total.append(total)
        self.fidelity.append(fidelity)
        self.stability.append(stability)


@dataclass(frozen=True)
class SignStats:
    """Sign agreement of one task's update with the history.

    ``same_fraction`` and ``opposite_fraction`` count only entries whose sign
    is decided at the run's alpha (see :func:`sign_tolerance`); the ``raw_``
    pair counts every non-zero entry.
    """

    task_index: int
    same_fraction: float
    opposite_fraction: float
    raw_same_fraction: float
    raw_opposite_fraction: float
    per_layer: Dict[str, Dict[str, float]]


@dataclass
class RunArtifacts:
    adapters: Dict[str, List[LoraAdapter]]
    acc_matrix: AccuracyMatrix
    loss_traces: List[LossTrace]
    sign_stats: List[SignStats]
    convergence: List[Dict[str, object]] = field(default_factory=list)
    merged_acc: List[float] = field(default_factory=list)
    merge_gain: List[float] = field(default_factory=list)

    @property
    def scratch(self) -> Optional[List[float]]:
        return self.acc_matrix.scratch


def _total_steps(dataset: TaskDataset, cfg: TrainConfig) -> int:
    return cfg.epochs_per_task * math.ceil(dataset.size / cfg.batch_size)


def _marks(total_steps: int) -> Dict[int, float]:
    return {int(round(frac * total_steps)): frac for frac in CONVERGENCE_MARKS}


def _stability_terms(model: ContinualModel, cfg: TrainConfig, task_index: int) -> List[Matrix]:
    if cfg.reg.lam <= 0 or task_index < cfg.reg.apply_from_task:
        return []
    return [
        ps_loss(model.active_delta(lid), model.history(lid), cfg.reg.alpha, cfg.reg.ps_reduction, cfg.reg.ps_terms)
        for lid in model.injected
    ]


def _orth_term(model: ContinualModel) -> Matrix:
    total = Matrix.zeros(1, 1)
    for lid in model.injected:
        total = add(total, orth_loss(model.active[lid].A, [a.A for a in model.frozen[lid]]))
    return total


def train_task(
    model: ContinualModel,
    dataset: TaskDataset,
    cfg: TrainConfig,
    task_index: int,
    trace: Optional[LossTrace] = None,
    convergence: Optional[List[Dict[str, object]]] = None,
) -> Dict[str, LoraAdapter]:
    """Optimize the model's active adapters on one task and return them.

    The stability term is only added when there is frozen history to protect.
    Minibatch order is seeded by ``(cfg.seed, task_index)``.
    """
    params: Dict[str, Matrix] = {}
    for lid, adapter in model.active.items():
        params[f"{lid}.A"] = adapter.A
        params[f"{lid}.B"] = adapter.B
    optimizer = build_optimizer(cfg.optimizer, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, task_index, 11]))
    regularize = model.task_count > 0
    marks = _marks(_total_steps(dataset, cfg)) if convergence is not None else {}

    def rebuild() -> None:
        model.set_active({lid: a.with_factors(params[f"{lid}.A"], params[f"{lid}.B"]) for lid, a in model.active.items()})

    def mark(step: int) -> None:
        if step in marks:
            convergence.append(
                {"task": task_index, "fraction": marks[step], "step": step, "train_acc": evaluate(model, dataset, cfg.threads, split="train")}
            )

    step = 0
    mark(step)
    for epoch in range(cfg.epochs_per_task):
        for idx in minibatches(dataset.size, cfg.batch_size, rng):
            with Tape() as tape:
                tape.watch(*params.values())
                rebuild()
                fidelity = softmax_xent(forward(model, Matrix(dataset.x_train[idx])), dataset.y_train[idx])
                stability = _stability_terms(model, cfg, task_index) if regularize else []
                orth = _orth_term(model) if regularize and cfg.reg.orth_mu > 0 else None
                loss = total_loss(fidelity, stability, cfg.reg, task_index, orth)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(task_index, step, value)
            grads = grad(tape, loss)
            params = optimizer.step(params, {name: grads[p] for name, p in params.items()})
            step += 1
            if trace is not None:
                trace.append(value, fidelity.item(), sum(s.item() for s in stability))
            rebuild()
            mark(step)
        if trace is not None and trace.total:
            LOGGER.debug("task %d epoch %d loss %.4f", task_index, epoch + 1, trace.total[-1])
    rebuild()
    return dict(model.active)


def sign_mask_refactor(model: ContinualModel, adapters: Dict[str, LoraAdapter], rank: int) -> Dict[str, LoraAdapter]:
    """Zero update entries that disagree in sign with the history, then refit at rank ``rank``.

    With no history every entry is kept.
    """
    refit = {}
    for lid, adapter in adapters.items():
        update = delta(adapter, model.scaling)
        history = model.history(lid).data
        if np.any(history != 0):
            keep = np.sign(update.data) * np.sign(history) >= 0
            update = Matrix(np.where(keep, update.data, 0.0))
        factors = refactor_delta(update, rank, adapter.task_index, lid)
        if model.scaling != 1.0:
            factors = factors.with_factors(factors.A, Matrix(factors.B.data / model.scaling))
        refit[lid] = factors
    return refit


def _sign_stats(model: ContinualModel, adapters: Dict[str, LoraAdapter], task_index: int, alpha: float) -> SignStats:
    tol = sign_tolerance(alpha)
    updates = {lid: delta(adapter, model.scaling) for lid, adapter in adapters.items()}
    decided: Dict[str, SignSplit] = {lid: sign_split(u, model.history(lid), 100.0, tol) for lid, u in updates.items()}
    raw: Dict[str, SignSplit] = {lid: sign_split(u, model.history(lid), 100.0) for lid, u in updates.items()}
    same, opposite = pooled_fractions(decided)
    raw_same, raw_opposite = pooled_fractions(raw)
    per_layer = {lid: {"same": s.same_fraction, "opposite": s.opposite_fraction} for lid, s in decided.items()}
    LOGGER.debug("task %d sign agreement same=%.4f opposite=%.4f (raw %.4f)", task_index, same, opposite, raw_opposite)
    return SignStats(
        task_index=task_index,
        same_fraction=same,
        opposite_fraction=opposite,
        raw_same_fraction=raw_same,
        raw_opposite_fraction=raw_opposite,
        per_layer=per_layer,
    )


def new_model(base: FrozenBase, cfg: TrainConfig) -> ContinualModel:
    combine = merge_history(cfg.merge) if cfg.merge_cadence == "per-task" else sum_history
    return ContinualModel(base, injected=cfg.injected, scaling=cfg.scaling, combine_history=combine)


def scratch_accuracies(base: FrozenBase, tasks: TaskSequence, cfg: TrainConfig) -> List[float]:
    """Accuracy of a fresh adapter trained on each task alone over the frozen base."""
    scores = []
    for t, dataset in enumerate(tasks, start=1):
        model = new_model(base, cfg)
        model.begin_task(t, cfg.rank, cfg.seed)
        train_task(model, dataset, cfg, t)
        scores.append(evaluate(model, dataset, cfg.threads))
    return scores


def run_sequence(tasks: TaskSequence, cfg: TrainConfig, base: FrozenBase) -> RunArtifacts:
    """Train every task in order and fill the accuracy matrix column by column."""
    if len(tasks) < 1:
        raise ValueError("run_sequence needs at least one task")
    model = new_model(base, cfg)
    acc = AccuracyMatrix(n_tasks=len(tasks), sizes=tasks.sizes)
    traces: List[LossTrace] = []
    signs: List[SignStats] = []
    convergence: List[Dict[str, object]] = []
    for t, dataset in enumerate(tqdm(tasks.tasks, desc="tasks", disable=not cfg.progress), start=1):
        acc.set_pre_task(t, evaluate(model, dataset, cfg.threads))
        model.begin_task(t, cfg.rank, cfg.seed)
        trace = LossTrace(task_index=t)
        adapters = train_task(model, dataset, cfg, t, trace=trace, convergence=convergence)
        if cfg.sign_mask_baseline:
            adapters = sign_mask_refactor(model, adapters, cfg.rank)
        signs.append(_sign_stats(model, adapters, t, cfg.reg.alpha))
        model.commit(adapters)
        for i in range(1, t + 1):
            acc.set(i, t, evaluate(model, tasks[i - 1], cfg.threads))
        traces.append(trace)
        LOGGER.info("task %d/%d (%s) trained: a(%d,%d)=%.4f", t, len(tasks), dataset.name, t, t, acc.get(t, t))
    if cfg.compute_scratch:
        acc.scratch = scratch_accuracies(base, tasks, cfg)
    merged = merged_weights(base, model.adapters_by_layer(), cfg.merge, cfg.scaling, model.injected)
    merged_acc = [evaluate(merged, dataset, cfg.threads) for dataset in tasks]
    n = len(tasks)
    gain = [merged_acc[i - 1] - acc.get(i, n) for i in range(1, n + 1)]
    return RunArtifacts(
        adapters=model.adapters_by_layer(),
        acc_matrix=acc,
        loss_traces=traces,
        sign_stats=signs,
        convergence=convergence,
        merged_acc=merged_acc,
        merge_gain=gain,
    )


__all__ = [
    "CONVERGENCE_MARKS",
    "LossTrace",
    "RunArtifacts",
    "SignStats",
    "TrainConfig",
    "new_model",
    "run_sequence",
    "scratch_accuracies",
    "sign_mask_refactor",
    "train_task",
]
