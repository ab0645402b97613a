"""Paired-seed component ablation.

Every variant of one seed shares the same base model and task sequence, so the
variants differ only in how adapters are trained and consolidated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from tqdm import tqdm

from src.config import ExperimentConfig, Settings, get_settings
from src.data.synthetic import TaskDataset, make_sequence, mixture_dataset
from src.lora.model import BaseModel, pretrain_base
from src.metrics.continual import AccuracyMatrix, bwt, final_acc, fr, seed_std
from src.shared.schemas import AblationReport, VariantSummary
from src.training.trainer import RunArtifacts, run_sequence

LOGGER = logging.getLogger(__name__)

ORTH_MU = 0.1
PRETRAIN_SEED_OFFSET = 1000


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: Dict[str, object]
    merged: bool


def variants(default_orth_mu: float = ORTH_MU) -> Dict[str, Variant]:
    return {
        v.name: v
        for v in (
            Variant("inc_lora", {"lam": 0.0}, merged=False),
            Variant("ps_only", {}, merged=False),
            Variant("ps_merge", {}, merged=True),
            Variant("magnitude_only", {"ps_terms": "magnitude"}, merged=False),
            Variant("magnitude_only+merge", {"ps_terms": "magnitude"}, merged=True),
            Variant("sign_only", {"ps_terms": "sign"}, merged=False),
            Variant("sign_only+merge", {"ps_terms": "sign"}, merged=True),
            Variant("sign_mask_baseline", {"lam": 0.0, "sign_mask_baseline": True}, merged=False),
            Variant("orth", {"lam": 0.0, "orth_mu": default_orth_mu}, merged=False),
            Variant("orth+ps", {"orth_mu": default_orth_mu}, merged=False),
        )
    }


def with_final_column(matrix: AccuracyMatrix, final: Sequence[float]) -> AccuracyMatrix:
    """Copy of ``matrix`` whose last column is replaced by ``final`` (the merged model)."""
    n = matrix.n_tasks
    entries = dict(matrix.entries)
    for i in range(1, n + 1):
        entries[(i, n)] = final[i - 1]
    copy = AccuracyMatrix(n_tasks=n, sizes=list(matrix.sizes), entries=entries, scratch=matrix.scratch)
    copy.pre_task.update(matrix.pre_task)
    return copy


def pretraining_pool(cfg: ExperimentConfig) -> TaskDataset:
    """Generic mixture the base model is fit on, drawn under a held-out data seed."""
    return mixture_dataset(cfg.to_sequence_spec(), cfg.data_seed + PRETRAIN_SEED_OFFSET, cfg.pretrain_angles)


def prepare_base(cfg: ExperimentConfig, settings: Optional[Settings] = None) -> BaseModel:
    settings = settings or get_settings()
    mixture = pretraining_pool(cfg)
    return pretrain_base(
        mixture,
        hidden_dim=cfg.hidden_dim,
        n_classes=cfg.n_classes,
        epochs=cfg.pretrain_epochs,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        progress=settings.progress,
    )


def _run_variant(cfg: ExperimentConfig, base: BaseModel, variant: Variant, settings: Settings) -> RunArtifacts:
    overrides = dict(variant.overrides)
    if "lam" not in overrides:
        overrides["lam"] = cfg.resolved_lambda
    if variant.merged:
        overrides["merge_cadence"] = cfg.merge_cadence
    else:
        overrides["merge_cadence"] = "final"
    run_cfg = cfg.model_copy(update=overrides)
    return run_sequence(make_sequence(run_cfg.to_sequence_spec()), run_cfg.to_train_config(settings), base)


def _summary(name: str, rows: List[Dict[str, Optional[float]]]) -> VariantSummary:
    keys = ("final_acc", "fr", "bwt", "opposite_fraction")
    mean: Dict[str, Optional[float]] = {}
    std: Dict[str, Optional[float]] = {}
    for key in keys:
        values = [r[key] for r in rows if r[key] is not None]
        mean[key] = sum(values) / len(values) if values else None
        std[key] = seed_std(values) if values else None
    return VariantSummary(
        variant=name,
        final_acc=[r["final_acc"] for r in rows],
        fr=[r["fr"] for r in rows],
        bwt=[r["bwt"] for r in rows],
        opposite_fraction=[r["opposite_fraction"] for r in rows],
        mean=mean,
        std=std,
    )


def run_ablation(
    cfg: ExperimentConfig,
    seeds: Sequence[int],
    names: Optional[Sequence[str]] = None,
    settings: Optional[Settings] = None,
) -> AblationReport:
    """Run each requested variant for each seed and aggregate final accuracy, FR, BWT and sign flips."""
    settings = settings or get_settings()
    table = variants(cfg.orth_mu or ORTH_MU)
    chosen = list(names) if names else list(table)
    unknown = [n for n in chosen if n not in table]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {sorted(table)}")
    rows: Dict[str, List[Dict[str, Optional[float]]]] = {n: [] for n in chosen}
    for seed in tqdm(seeds, desc="seeds", disable=not settings.progress):
        seeded = cfg.model_copy(update={"seed": seed, "master_seed": None})
        base = prepare_base(seeded, settings)
        for name in chosen:
            variant = table[name]
            artifacts = _run_variant(seeded, base, variant, settings)
            matrix = artifacts.acc_matrix
            if variant.merged:
                matrix = with_final_column(matrix, artifacts.merged_acc)
            multi = matrix.n_tasks >= 2
            rows[name].append(
                {
                    "final_acc": final_acc(matrix),
                    "fr": fr(matrix) if multi else None,
                    "bwt": bwt(matrix) if multi else None,
                    "opposite_fraction": artifacts.sign_stats[-1].opposite_fraction,
                }
            )
            LOGGER.info("seed %d %s: final_acc=%.4f", seed, name, rows[name][-1]["final_acc"])
    return AblationReport(
        seeds=list(seeds),
        variants=[_summary(name, rows[name]) for name in chosen],
        config=cfg.resolved(),
    )


__all__ = ["ORTH_MU", "Variant", "prepare_base", "pretraining_pool", "run_ablation", "variants", "with_final_column"]
