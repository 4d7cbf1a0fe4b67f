"""Shared fixtures: a tiny random-init model for fast unit tests and a few
canonical data objects. The full-size coded model only appears in the
acceptance suite, where the end-to-end pipeline actually runs."""

import numpy as np
import pytest

from atmoe.config import Config, ModelSection
from atmoe.model import ToyTransformer
from atmoe.numerics import derive_rng
from atmoe.taskgen import TaskCatalog, generate


def tiny_config(seed: int = 7, **model_overrides) -> Config:
    cfg = Config(seed=seed)
    fields = dict(vocab_size=8, d_model=4, n_layers=1, n_heads=2, d_ff=8,
                  max_seq_len=8, rank=2, base_init="random")
    fields.update(model_overrides)
    cfg.model = ModelSection(**fields)
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_cfg() -> Config:
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg) -> ToyTransformer:
    return ToyTransformer(tiny_cfg)


@pytest.fixture
def tiny_tokens(tiny_cfg) -> np.ndarray:
    rng = derive_rng(tiny_cfg.seed, "test", "tokens")
    return rng.integers(0, tiny_cfg.model.vocab_size, size=6)


@pytest.fixture(scope="session")
def catalog() -> TaskCatalog:
    return TaskCatalog()


@pytest.fixture(scope="session")
def small_dataset(catalog):
    return generate(catalog, 64, seed=123, multi_intent_fraction=0.3)
