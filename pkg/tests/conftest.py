"""Shared fixtures: tiny models and synthetic tasks sized for fast tests."""

from __future__ import annotations

import numpy as np
import pytest

from camp.camphead import ModelConfig, build_model
from camp.moldata import make_synthetic_tasks


TINY = dict(
    atom_feature_dim=6,
    n_bond_types=3,
    d_model=32,
    d_node=16,
    d_mlp=64,
    n_layers=2,
    n_heads=2,
    mpnn_steps=2,
)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=7)


@pytest.fixture
def tiny_tasks():
    return make_synthetic_tasks(4, 16, TINY["atom_feature_dim"], np.random.default_rng(11))
