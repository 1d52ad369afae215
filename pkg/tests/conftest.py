"""Shared fixtures: seeded generators, tiny model configs and a mini dataset."""

import os

import numpy as np
import pytest

from rccformer.certify import tiny_model_config
from rccformer.core.model_config import RunConfig, SynthConfig
from rccformer.core.rng import make_rng
from rccformer.data.loader import build_dataset


def pytest_collection_modifyitems(config, items):
    if os.getenv("RCC_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set RCC_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def mini_synth() -> SynthConfig:
    return SynthConfig(n_train=4, n_val=2, image_size=32, count_min=1, count_max=6,
                       head_radius=2.0, perspective=1.5, clutter=0.5)


@pytest.fixture
def mini_dataset(tmp_path, mini_synth):
    root = tmp_path / "synth"
    build_dataset(root, mini_synth, seed=7)
    return root


@pytest.fixture
def mini_run(tmp_path, mini_dataset, tiny_config) -> RunConfig:
    return RunConfig(model=tiny_config, epochs=1, batch_size=2, crop=32, seed=3,
                     dataset=str(mini_dataset), out=str(tmp_path / "run"))
