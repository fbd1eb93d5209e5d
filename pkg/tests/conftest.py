"""Shared fixtures for the idiokv test suite."""

import numpy as np
import pytest

from idiokv.config import get_settings
from idiokv.harness.tasks import TaskParams, generate_needle_task
from idiokv.model import GQAModel, ModelConfig


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Settings are cached per process; start every test from the defaults."""
    for name in ("IDIOKV_WINDOW", "IDIOKV_WORKERS", "IDIOKV_ARTIFACT_DIR", "IDIOKV_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_model(
    layers: int = 2, q_heads: int = 4, kv_heads: int = 2, head_dim: int = 4, seed: int = 0
) -> GQAModel:
    config = ModelConfig(
        num_layers=layers,
        num_q_heads=q_heads,
        num_kv_heads=kv_heads,
        head_dim=head_dim,
        seed=seed,
    )
    return GQAModel.seeded(config)


@pytest.fixture
def small_model() -> GQAModel:
    """2 layers, 4 query heads in 2 KV groups, hidden_dim 16."""
    return make_model()


def make_task(hidden_dim: int, seed: int = 0, prompt_len: int = 48, family: str = "single_needle"):
    params = TaskParams(
        prompt_len=prompt_len,
        span_len=4,
        answer_steps=6,
        hidden_dim=hidden_dim,
        family=family,
    )
    return generate_needle_task(params, seed)


@pytest.fixture
def small_task(small_model):
    return make_task(small_model.config.hidden_dim)


def pytest_addoption(parser):
    parser.addoption(
        "--update-golden",
        action="store_true",
        default=False,
        help="Rewrite tests/golden files from the current code instead of comparing",
    )


@pytest.fixture
def update_golden(request) -> bool:
    return request.config.getoption("--update-golden")
