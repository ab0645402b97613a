"""Centralised runtime settings and the experiment document."""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.data.synthetic import SequenceSpec
from src.merging.merge import MergePolicy, MergeStrategy
from src.training.regularizers import PSReduction, PSTerms, RegularizerConfig, StabilityPreset, default_lambda
from src.training.trainer import TrainConfig


class Settings(BaseSettings):
    """Process-level settings loaded from the environment.

    Experiment hyper-parameters live in :class:`ExperimentConfig`; these only
    govern how the process runs.
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    threads: int = Field(default=1, ge=1, validation_alias="PSLORA_THREADS")
    log_level: str = Field(default="INFO", validation_alias="PSLORA_LOG_LEVEL")
    out_dir: Path = Field(default=Path("runs"), validation_alias="PSLORA_OUT_DIR")
    progress: bool = Field(default=False, validation_alias="PSLORA_PROGRESS")


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Return cached process settings."""

    return Settings()


class ExperimentConfig(BaseModel):
    """Flat experiment document; JSON keys match the field names (``lambda`` for ``lam``)."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    # task sequence
    n_tasks: int = Field(default=4, ge=1)
    d_in: int = Field(default=20, ge=3)
    n_classes: int = Field(default=5, ge=2)
    samples_per_task: int = Field(default=500, ge=1)
    test_per_task: int = Field(default=200, ge=1)
    angles: Optional[List[float]] = None
    order: Optional[List[int]] = None
    master_seed: Optional[int] = Field(default=None, description="data seed; follows `seed` when unset")

    # base model
    hidden_dim: int = Field(default=32, ge=1)
    pretrain_epochs: int = Field(default=20, ge=0)
    pretrain_angles: List[float] = Field(default_factory=lambda: [0.0, 10.0, 20.0])

    # adapter training
    seed: int = 0
    epochs_per_task: int = Field(default=5, ge=0)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-2, gt=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    rank: int = Field(default=4, ge=1)
    scaling: float = Field(default=1.0, gt=0)
    sign_mask_baseline: bool = False
    compute_scratch: bool = False

    # regularizers
    lam: Optional[float] = Field(default=None, ge=0, alias="lambda", description="0.001 for N <= 4, else 0.1")
    stability_preset: StabilityPreset = Field(default="standard", description="`desk` fills an unset lambda with the desk calibration")
    alpha: float = Field(default=10.0, gt=0)
    apply_from_task: int = Field(default=2, ge=1)
    orth_mu: float = Field(default=0.0, ge=0)
    ps_reduction: PSReduction = "elementwise"
    ps_terms: PSTerms = "both"

    # merging
    merge_strategy: MergeStrategy = "magnitude_max"
    ties_trim_fraction: float = Field(default=0.8, gt=0, le=1)
    merge_cadence: Literal["final", "per-task"] = "final"

    # analysis
    top_fraction: float = Field(default=0.2, gt=0, le=1)
    pool_window: int = Field(default=4, ge=1)
    taylor_ridge: float = Field(default=1e-2, gt=0)
    taylor_directions: int = Field(default=100, ge=1)
    taylor_radius: float = Field(default=1e-2, gt=0)

    # outputs
    out_dir: Optional[Path] = None

    @model_validator(mode="after")
    def _check_sequence(self) -> "ExperimentConfig":
        try:
            self.to_sequence_spec()
        except ValidationError as exc:
            raise ValueError(f"invalid task sequence: {exc.errors()[0]['msg']}") from None
        return self

    @property
    def resolved_lambda(self) -> float:
        if self.lam is not None:
            return self.lam
        return default_lambda(self.n_tasks, self.stability_preset)

    @property
    def data_seed(self) -> int:
        return self.seed if self.master_seed is None else self.master_seed

    def resolved_out_dir(self, settings: Optional[Settings] = None) -> Path:
        if self.out_dir is not None:
            return self.out_dir
        return (settings or get_settings()).out_dir

    def to_sequence_spec(self) -> SequenceSpec:
        return SequenceSpec(
            n_tasks=self.n_tasks,
            d_in=self.d_in,
            n_classes=self.n_classes,
            samples_per_task=self.samples_per_task,
            test_per_task=self.test_per_task,
            angles=self.angles,
            order=self.order,
            master_seed=self.data_seed,
        )

    def to_regularizer_config(self) -> RegularizerConfig:
        return RegularizerConfig(
            lam=self.resolved_lambda,
            alpha=self.alpha,
            apply_from_task=self.apply_from_task,
            orth_mu=self.orth_mu,
            ps_reduction=self.ps_reduction,
            ps_terms=self.ps_terms,
        )

    def to_merge_policy(self) -> MergePolicy:
        return MergePolicy(strategy=self.merge_strategy, ties_trim_fraction=self.ties_trim_fraction)

    def to_train_config(self, settings: Optional[Settings] = None) -> TrainConfig:
        settings = settings or get_settings()
        return TrainConfig(
            epochs_per_task=self.epochs_per_task,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            seed=self.seed,
            reg=self.to_regularizer_config(),
            rank=self.rank,
            scaling=self.scaling,
            sign_mask_baseline=self.sign_mask_baseline,
            merge=self.to_merge_policy(),
            merge_cadence=self.merge_cadence,
            compute_scratch=self.compute_scratch,
            threads=settings.threads,
            progress=settings.progress,
        )

    def resolved(self) -> Dict[str, Any]:
        """The document echoed into reports, with ``lambda`` and the data seed filled in."""
        payload = self.model_dump(mode="json", by_alias=True)
        payload["lambda"] = self.resolved_lambda
        payload["master_seed"] = self.data_seed
        # reports stay byte-identical wherever they are written
        payload.pop("out_dir", None)
        return payload


__all__ = ["ExperimentConfig", "Settings", "get_settings"]
