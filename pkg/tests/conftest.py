"""Shared fixtures: tiny hand-made cohorts, small synthetic cohorts and models."""
import numpy as np
import pytest

from services.corpus import build_cohort
from services.model import Inpatient2Vec, ModelConfig
from services.synthetic import SyntheticSpec, generate_synthetic
from services.training import TrainConfig

TINY_RECORDS = [
    ("V1", "D00.001", [["A1", "A2"], ["A2", "A3", "A4"], ["A1"]]),
    ("V2", "D00.001", [["A3", "A5"], ["A1", "A5"]]),
    ("V3", "D01.002", [["A2", "A4", "A5"], ["A4"], ["A3", "A4"], ["A1", "A2"]]),
    ("V4", "D01.002", [["A5"], ["A1", "A3"]]),
]


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_cohort():
    return build_cohort(TINY_RECORDS, {"generator": "fixture"})


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(
        n_visits=60, n_activities=30, n_clusters=3, n_diagnoses=3, n_families=3,
        mean_los=4.0, los_spread=0.5, mean_activities_per_day=3.0, seed=0,
    )


@pytest.fixture(scope="session")
def small_synthetic(small_spec):
    return generate_synthetic(small_spec)


@pytest.fixture
def small_cohort(small_synthetic):
    return small_synthetic[0]


@pytest.fixture
def small_config():
    return ModelConfig(embed_dim=16, n_heads=2, n_layers=1, lstm_hidden=8)


@pytest.fixture
def tiny_model(tiny_cohort, small_config):
    return Inpatient2Vec(small_config, tiny_cohort.vocabulary, seed=0)


@pytest.fixture
def fast_train():
    return TrainConfig(epochs=1, batch_size=16, lr=1e-3, progress=False,
                       finetune_batch_size=16, finetune_lr=1e-3, seed=0)
