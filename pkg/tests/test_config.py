from __future__ import annotations

from pathlib import Path

import pytest
from pydantic import ValidationError

from src.config import ExperimentConfig, Settings
from src.training.regularizers import DESK_LAMBDA


def test_lambda_default_follows_sequence_length() -> None:
    assert ExperimentConfig(n_tasks=4).resolved_lambda == 0.001
    assert ExperimentConfig(n_tasks=15).resolved_lambda == 0.1
    assert ExperimentConfig.model_validate({"n_tasks": 15, "lambda": 0.02}).resolved_lambda == 0.02


def test_desk_preset_fills_only_an_unset_lambda() -> None:
    assert ExperimentConfig(stability_preset="desk").resolved_lambda == DESK_LAMBDA
    assert ExperimentConfig(n_tasks=15, stability_preset="desk").resolved_lambda == DESK_LAMBDA
    pinned = ExperimentConfig.model_validate({"lambda": 0.5, "stability_preset": "desk"})
    assert pinned.resolved_lambda == 0.5
    assert pinned.to_train_config().reg.lam == 0.5
    with pytest.raises(ValidationError):
        ExperimentConfig(stability_preset="huge")


def test_data_seed_follows_training_seed_unless_pinned() -> None:
    assert ExperimentConfig(seed=7).data_seed == 7
    assert ExperimentConfig(seed=7, master_seed=1).data_seed == 1


def test_resolved_document_is_location_independent() -> None:
    resolved = ExperimentConfig(out_dir=Path("/tmp/elsewhere")).resolved()
    assert "out_dir" not in resolved
    assert resolved["lambda"] == 0.001
    assert resolved["master_seed"] == 0
    assert "lam" not in resolved


def test_translation_into_stage_configs() -> None:
    cfg = ExperimentConfig(n_tasks=3, merge_strategy="ties", ties_trim_fraction=0.5, orth_mu=0.2, epochs_per_task=2)
    train = cfg.to_train_config(Settings(PSLORA_THREADS=2))
    assert train.threads == 2
    assert train.epochs_per_task == 2
    assert train.reg.orth_mu == 0.2
    assert train.merge.strategy == "ties"
    assert cfg.to_sequence_spec().n_tasks == 3


def test_invalid_documents_are_rejected() -> None:
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate({"learning_rte": 0.1})
    with pytest.raises(ValidationError):
        ExperimentConfig(n_tasks=3, order=[1, 2])
    with pytest.raises(ValidationError):
        ExperimentConfig(merge_strategy="median")


def test_settings_read_the_environment(monkeypatch, tmp_path) -> None:
    monkeypatch.setenv("PSLORA_THREADS", "3")
    monkeypatch.setenv("PSLORA_OUT_DIR", str(tmp_path))
    settings = Settings()
    assert settings.threads == 3
    assert settings.out_dir == tmp_path
    assert ExperimentConfig().resolved_out_dir(settings) == tmp_path
