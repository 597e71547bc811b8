"""Shared fixtures: tiny model configs and experiments that train in seconds."""

import os
import sys
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config_manager import DatasetConfig, ExperimentConfig, OptimizerConfig  # noqa: E402
from data_structures import ModelConfig, ProtocolSetting, ProtocolSpec  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale runs, enabled with FLEXPROMPT_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("FLEXPROMPT_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set FLEXPROMPT_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_model_cfg():
    """2 layers, d=16, 16x16 images split into 2x2 patches per modality."""
    return ModelConfig(image_size=16, patch_size=8, num_layers=2, embed_dim=16, num_heads=2,
                       mlp_ratio=2.0, prompt_length=4, hidden_dim=4)


@pytest.fixture
def tiny_experiment(tmp_path, tiny_model_cfg, monkeypatch):
    monkeypatch.delenv("FLEXPROMPT_CACHE", raising=False)
    return ExperimentConfig(
        model=tiny_model_cfg,
        protocol=ProtocolSpec(ProtocolSetting.RGBD_MISS_D, 0.5, 0),
        dataset=DatasetConfig(n_train=16, n_dev=8, n_test=8),
        optimizer=OptimizerConfig(lr=1e-3, weight_decay=0.0, batch_size=8),
        epochs=2,
        output_dir=str(tmp_path / "run"),
        cache_dir=str(tmp_path / "cache"),
    )


@pytest.fixture
def float64_experiment(tiny_experiment):
    return replace(tiny_experiment, dtype="float64")
