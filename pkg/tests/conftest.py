"""Shared desk-scale fixtures: |V| = 12, d_model = 8, one layer, T = 8."""
import numpy as np
import pytest

from data import Interaction, build_dataset, split_leave_one_out
from model import ModelConfig, init_params


TINY_SEQUENCES = [
    [1, 2, 3, 4, 5, 6],
    [2, 3, 4, 5, 7, 8],
    [3, 4, 5, 9, 10],
    [6, 7, 8, 9, 11, 12],
    [1, 5, 9, 12, 2],
    [10, 11, 12, 1, 3, 4, 6],
]


def interactions_from(sequences, first_user=1):
    out = []
    for u, seq in enumerate(sequences, start=first_user):
        out.extend(Interaction(u, item, 4, 100 * t) for t, item in enumerate(seq))
    return out


def tiny_model_config(**overrides):
    settings = dict(num_items=12, d_model=8, n_heads=2, n_layers=1, max_len=8, dropout=0.2, init_std=0.3)
    settings.update(overrides)
    return ModelConfig(**settings)


@pytest.fixture
def tiny_dataset():
    return build_dataset(interactions_from(TINY_SEQUENCES), min_seq_len=3)


@pytest.fixture
def tiny_split(tiny_dataset):
    return split_leave_one_out(tiny_dataset)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_env(monkeypatch):
    monkeypatch.setenv("MERGE_REC_DESK", "1")


# CLI/pipeline experiment: 16 synthetic users, one epoch per stage
TINY_EXPERIMENT = {
    "data": {
        "synthetic": {"num_users": 16, "num_items": 20, "min_len": 6, "max_len": 10, "num_patterns": 3, "noise": 0.1},
        "min_seq_len": 3,
    },
    "model": {"d_model": 8, "n_heads": 2, "n_layers": 1, "max_len": 8},
    "training": {"batch_size": 4, "mask_prob": 0.3},
    "epochs": {"baseline": 1, "finetune": 1, "post_merge": 1},
    "fisher": {"method": "topk", "sample_size": 3, "batch_size": 4},
    "eval": {"random_k": 5, "popular_k": 5},
    "topk_sizes": [2, 5],
    "plane_samples": 3,
}
