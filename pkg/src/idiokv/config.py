"""Application configuration using pydantic-settings.

Two layers of configuration exist:

* ``Settings`` - process-wide defaults read from ``IDIOKV_*`` environment
  variables (or a ``.env`` file). These hold the method constants such as the
  observation window and the per-layer budget floor.
* ``RunConfig`` - one JSON document per run, consumed by the CLI. Every
  section falls back to the ``Settings`` defaults when omitted.
"""

import json
from functools import lru_cache
from pathlib import Path
from typing import List

from pydantic import BaseModel, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="IDIOKV_",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    app_name: str = Field(default="idiokv", description="Application name")
    log_level: str = Field(default="INFO", description="Logging level")
    artifact_dir: Path = Field(
        default=Path("artifacts"),
        description="Directory where CLI artifacts are read from and written to",
    )
    workers: int = Field(default=1, ge=1, description="Worker threads for per-task fan-out")

    # Token selection
    window: int = Field(default=8, ge=1, description="Observation window length")
    pool_kernel: int = Field(default=5, ge=1, description="Average-pooling kernel (odd)")
    top_k_heads: int = Field(default=4, ge=1, description="Semantic retrieval heads per layer")
    sink: int = Field(default=4, ge=0, description="Initial tokens kept by the streaming policy")

    # Error profiling
    probe_budget: int = Field(default=32, ge=1, description="Per-layer budget used while probing")
    decode_steps: int = Field(default=8, ge=1, description="Teacher-forced steps while probing")
    error_epsilon: float = Field(default=1e-6, gt=0.0, description="Denominator guard")

    # Allocation
    min_layer_budget: int = Field(default=32, ge=1, description="Per-layer lower bound m")
    max_budget_factor: int = Field(
        default=3, ge=1, description="Upper bound M as a multiple of the per-layer budget"
    )

    # Evaluation
    recall_threshold: float = Field(
        default=0.9, gt=0.0, le=1.0, description="Cosine similarity counted as a recall"
    )

    @field_validator("pool_kernel")
    @classmethod
    def kernel_must_be_odd(cls, v: int) -> int:
        """Reject even pooling kernels."""
        if v % 2 == 0:
            raise ValueError(f"pool_kernel must be odd, got {v}")
        return v


@lru_cache
def get_settings() -> Settings:
    """Get cached application settings.

    Returns:
        Settings: Application configuration object
    """
    return Settings()


def _default(name: str) -> object:
    return getattr(get_settings(), name)


class ModelSection(BaseModel):
    """Geometry of the toy model built by ``gen-model``."""

    num_layers: int = Field(default=2, ge=1)
    num_q_heads: int = Field(default=8, ge=1)
    num_kv_heads: int = Field(default=2, ge=1)
    head_dim: int = Field(default=8, ge=1)
    planted: bool = Field(default=False, description="Plant head roles instead of seeding weights")


class TaskSection(BaseModel):
    """Synthetic needle-task bundle built by ``gen-tasks``."""

    count: int = Field(default=4, ge=1, description="Tasks per family")
    prompt_len: int = Field(default=96, ge=2)
    span_len: int = Field(default=6, ge=1)
    answer_steps: int = Field(default=8, ge=1)
    families: List[str] = Field(default=["single_needle", "decoy_needles"])


class PolicySection(BaseModel):
    """Token-selection parameters shared by all policies."""

    window: int = Field(default_factory=lambda: _default("window"), ge=1)
    pool_kernel: int = Field(default_factory=lambda: _default("pool_kernel"), ge=1)
    top_k_heads: int = Field(default_factory=lambda: _default("top_k_heads"), ge=1)
    sink: int = Field(default_factory=lambda: _default("sink"), ge=0)


class AllocationSection(BaseModel):
    """Global budget and per-layer bounds for error-aware allocation."""

    total: int | None = Field(default=None, ge=1, description="Global token budget")
    min_budget: int | None = Field(default=None, ge=1)
    max_budget: int | None = Field(default=None, ge=1)
    probe_budget: int = Field(default_factory=lambda: _default("probe_budget"), ge=1)
    decode_steps: int = Field(default_factory=lambda: _default("decode_steps"), ge=1)
    mode: str = Field(default="one_at_a_time", pattern="^(one_at_a_time|joint)$")


class EvaluationSection(BaseModel):
    """Which policies and budgets ``eval`` runs."""

    policies: List[str] = Field(default=["streaming", "snapkv", "compresskv"])
    budget: int | None = Field(default=None, ge=1, description="Uniform per-layer budget")
    use_plan: bool = Field(default=True, description="Also evaluate the allocated plan")


class AblationSection(BaseModel):
    """Head-masking sweep."""

    k_values: List[int] = Field(default=[0, 2, 4, 8])


class RunConfig(BaseModel):
    """One JSON document describing a full pipeline run."""

    seed: int = 0
    model: ModelSection = Field(default_factory=ModelSection)
    tasks: TaskSection = Field(default_factory=TaskSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    allocation: AllocationSection = Field(default_factory=AllocationSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    ablation: AblationSection = Field(default_factory=AblationSection)


def load_run_config(path: Path | None) -> RunConfig:
    """Load and validate a run configuration.

    Args:
        path: JSON document to read, or None for all defaults

    Returns:
        RunConfig: Validated configuration

    Raises:
        ConfigError: If the file cannot be parsed or fails validation
    """
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return RunConfig.model_validate(raw)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"Invalid run config {path}: {e}") from e
