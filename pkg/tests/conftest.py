from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from src.data.synthetic import SequenceSpec, make_sequence
from src.lora.model import init_base
from src.training.regularizers import RegularizerConfig
from src.training.trainer import TrainConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> SequenceSpec:
    return SequenceSpec(n_tasks=3, d_in=6, n_classes=3, samples_per_task=60, test_per_task=30, master_seed=3)


@pytest.fixture
def tiny_sequence(tiny_spec):
    return make_sequence(tiny_spec)


@pytest.fixture
def tiny_base(tiny_spec):
    return init_base([tiny_spec.d_in, 8, tiny_spec.n_classes], seed=0)


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(epochs_per_task=2, batch_size=16, rank=2, seed=5, reg=RegularizerConfig(lam=0.01))


@pytest.fixture
def tiny_experiment(tmp_path: Path) -> Path:
    """A config document small enough for end-to-end CLI runs."""
    path = tmp_path / "experiment.json"
    path.write_text(
        json.dumps(
            {
                "n_tasks": 2,
                "d_in": 5,
                "n_classes": 3,
                "samples_per_task": 48,
                "test_per_task": 24,
                "hidden_dim": 6,
                "pretrain_epochs": 2,
                "epochs_per_task": 1,
                "batch_size": 16,
                "rank": 2,
                "pool_window": 1,
                "taylor_directions": 5,
            }
        ),
        encoding="utf-8",
    )
    return path
