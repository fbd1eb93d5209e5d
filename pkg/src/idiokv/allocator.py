"""Per-layer compression-error profiling and layer-adaptive budget allocation.

Profiling compresses the cache to a small probe budget and measures, for every
layer and decode step, the relative Frobenius gap between the layer's
attention-block output under the compressed and the full cache. Errors are
normalized per task family, averaged across families and normalized again.

Allocation starts every layer at the floor ``m``, hands out the remaining
budget proportionally to the normalized errors (clipped to ``[m, M]``) and then
corrects rounding drift one token at a time.
"""

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .config import get_settings
from .errors import ConfigError, InfeasibleBudgetError
from .logging_config import get_logger
from .model import GQAModel, Generation, attention_block_output, teacher_forced_decode
from .numerics import frobenius_norm
from .policies import EvictionPolicy

if TYPE_CHECKING:
    from .harness.tasks import NeedleTask

logger = get_logger(__name__)

PROFILE_MODES = ("one_at_a_time", "joint")


class LayerErrorProfile(BaseModel):
    """Layer error scores at every normalization stage."""

    families: List[str]
    raw: Dict[str, List[float]] = Field(..., description="Summed errors per family and layer")
    per_family: Dict[str, List[float]] = Field(..., description="Raw errors L1-normalized per family")
    averaged: List[float] = Field(..., description="Mean of the per-family vectors")
    normalized: List[float] = Field(..., description="Averaged vector L1-normalized")
    epsilon: float
    probe_budget: int
    decode_steps: int
    mode: str
    policy: str
    task_count: int

    @model_validator(mode="after")
    def check_values(self) -> "LayerErrorProfile":
        vectors = list(self.raw.values()) + list(self.per_family.values())
        for vec in vectors + [self.averaged, self.normalized]:
            arr = np.asarray(vec, dtype=np.float64)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError("Layer errors must be finite and non-negative")
        if abs(math.fsum(self.normalized) - 1.0) > 1e-9:
            raise ValueError(f"Normalized errors sum to {math.fsum(self.normalized)}, not 1")
        return self

    @property
    def num_layers(self) -> int:
        return len(self.normalized)


class BudgetPlan(BaseModel):
    """Per-layer token budgets summing to ``total``."""

    budgets: List[int]
    total: int = Field(..., ge=1)
    min_budget: int = Field(..., ge=1)
    max_budget: int = Field(..., ge=1)
    source: str = "allocated"
    iterations: int = Field(default=0, ge=0, description="Correction-loop iterations")

    @model_validator(mode="after")
    def check_plan(self) -> "BudgetPlan":
        if sum(self.budgets) != self.total:
            raise ValueError(f"Budgets sum to {sum(self.budgets)}, expected {self.total}")
        low = [b for b in self.budgets if not self.min_budget <= b <= self.max_budget]
        if low:
            raise ValueError(
                f"Budgets {low} fall outside [{self.min_budget}, {self.max_budget}]"
            )
        return self

    @property
    def num_layers(self) -> int:
        return len(self.budgets)

    def to_csv(self) -> str:
        """``layer,budget`` rows for bar charts."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "budget"])
        for layer, budget in enumerate(self.budgets):
            writer.writerow([layer, budget])
        return buf.getvalue()


def l1_normalize(values: Sequence[float]) -> np.ndarray:
    """Divide by the sum; an all-zero vector becomes uniform."""
    arr = np.asarray(values, dtype=np.float64)
    total = arr.sum()
    if total == 0.0:
        return np.full(arr.shape, 1.0 / arr.size)
    return arr / total


def _layer_outputs(run: Generation, layer: int, step: int) -> np.ndarray:
    inputs = run.layer_inputs[step]
    return inputs[layer + 1] if layer + 1 < len(inputs) else run.outputs[step]


def block_outputs(
    model: GQAModel,
    task: "NeedleTask",
    policy: EvictionPolicy,
    probe_budget: int,
    decode_steps: int,
    mode: str = "one_at_a_time",
) -> Tuple[np.ndarray, np.ndarray]:
    """Full and compressed attention-block outputs of one task.

    In ``one_at_a_time`` mode each layer is replayed from its full-cache input
    with only that layer's prompt rows compressed. In ``joint`` mode every
    layer is compressed and the decode is run end to end.

    Returns:
        Tuple of (full, compressed), each of shape (layers, steps, hidden_dim)
    """
    if decode_steps < 1:
        raise ConfigError("Error profiling needs at least one decode step")
    if mode not in PROFILE_MODES:
        raise ConfigError(f"Unknown profiling mode {mode!r}; expected one of {PROFILE_MODES}")
    available = task.answer_embeddings.shape[0]
    if decode_steps > available:
        raise ConfigError(f"Task provides {available} decode inputs, {decode_steps} requested")

    steps = task.answer_embeddings[:decode_steps]
    layers = model.config.num_layers
    full_run = teacher_forced_decode(model, task.prompt_embeddings, steps)
    shape = (layers, decode_steps, model.config.hidden_dim)
    full = np.zeros(shape)
    comp = np.zeros(shape)

    if mode == "joint":
        budgets = [probe_budget] * layers
        comp_run = teacher_forced_decode(
            model,
            task.prompt_embeddings,
            steps,
            compress=lambda cache, trace: policy.compress(cache, trace, budgets),
        )
        for layer in range(layers):
            for t in range(decode_steps):
                full[layer, t] = _layer_outputs(full_run, layer, t)
                comp[layer, t] = _layer_outputs(comp_run, layer, t)
        return full, comp

    prompt_len = full_run.trace.prompt_len
    for layer in range(layers):
        decision = policy.decide(full_run.trace, layer, probe_budget)
        view = full_run.cache.view(layer)
        for t in range(decode_steps):
            generated = list(range(prompt_len, prompt_len + t + 1))
            x = full_run.layer_inputs[t][layer]
            full[layer, t] = attention_block_output(
                model, layer, x, view.select(list(range(prompt_len)) + generated)
            )
            comp[layer, t] = attention_block_output(
                model, layer, x, view.select(decision.keep_indices + generated)
            )
    return full, comp


def relative_errors(full: np.ndarray, comp: np.ndarray, epsilon: float) -> np.ndarray:
    """Per layer, the sum over steps of ``||comp - full|| / (||full|| + epsilon)``."""
    errors = np.zeros(full.shape[0])
    for layer in range(full.shape[0]):
        for t in range(full.shape[1]):
            gap = frobenius_norm(comp[layer, t] - full[layer, t])
            errors[layer] += gap / (frobenius_norm(full[layer, t]) + epsilon)
    return errors


def profile_layer_errors(
    model: GQAModel,
    tasks: Sequence["NeedleTask"],
    probe_budget: int,
    policy: EvictionPolicy,
    decode_steps: int | None = None,
    epsilon: float | None = None,
    mode: str = "one_at_a_time",
    workers: int | None = None,
) -> LayerErrorProfile:
    """Measure per-layer compression error over calibration tasks.

    Task families act as datasets: errors are summed within a family,
    normalized per family, averaged across families and normalized again.

    Raises:
        ConfigError: If there are no tasks, zero decode steps or an unknown mode
        InfeasibleBudgetError: If ``probe_budget`` is below the policy's floor
    """
    settings = get_settings()
    decode_steps = settings.decode_steps if decode_steps is None else decode_steps
    epsilon = settings.error_epsilon if epsilon is None else epsilon
    workers = workers or settings.workers
    if not tasks:
        raise ConfigError("Error profiling needs at least one task")
    if decode_steps < 1:
        raise ConfigError("Error profiling needs at least one decode step")

    logger.info(
        f"Profiling {model.config.num_layers} layers on {len(tasks)} tasks "
        f"(probe_budget={probe_budget}, steps={decode_steps}, mode={mode})"
    )

    def task_errors(task: "NeedleTask") -> np.ndarray:
        full, comp = block_outputs(model, task, policy, probe_budget, decode_steps, mode)
        return relative_errors(full, comp, epsilon)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_task = list(pool.map(task_errors, tasks))

    families = sorted({task.family for task in tasks})
    raw: Dict[str, np.ndarray] = {f: np.zeros(model.config.num_layers) for f in families}
    for task, errors in zip(tasks, per_task):
        raw[task.family] = raw[task.family] + errors

    per_family = {f: l1_normalize(raw[f]) for f in families}
    averaged = np.zeros(model.config.num_layers)
    for f in families:
        averaged += per_family[f]
    averaged /= len(families)
    normalized = l1_normalize(averaged)

    logger.info(f"Layer errors: {np.round(normalized, 4).tolist()}")
    return LayerErrorProfile(
        families=families,
        raw={f: raw[f].tolist() for f in families},
        per_family={f: per_family[f].tolist() for f in families},
        averaged=averaged.tolist(),
        normalized=normalized.tolist(),
        epsilon=epsilon,
        probe_budget=probe_budget,
        decode_steps=decode_steps,
        mode=mode,
        policy=policy.name,
        task_count=len(tasks),
    )


def round_half_away(x: float) -> int:
    """Round to nearest, halves away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def allocate(errors: Sequence[float], total: int, min_budget: int, max_budget: int) -> BudgetPlan:
    """Split ``total`` tokens across layers in proportion to their errors.

    Args:
        errors: Normalized per-layer errors
        total: Global budget
        min_budget: Per-layer floor ``m``
        max_budget: Per-layer ceiling ``M``

    Returns:
        BudgetPlan: Budgets within ``[m, M]`` summing to ``total``

    Raises:
        InfeasibleBudgetError: If ``total`` lies outside ``[L*m, L*M]``
    """
    e = np.asarray(errors, dtype=np.float64)
    layers = e.size
    if layers == 0:
        raise InfeasibleBudgetError("Cannot allocate over zero layers")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise InfeasibleBudgetError("Layer errors must be finite and non-negative")
    if min_budget < 1 or min_budget > max_budget:
        raise InfeasibleBudgetError(f"Invalid bounds m={min_budget}, M={max_budget}")
    if not layers * min_budget <= total <= layers * max_budget:
        raise InfeasibleBudgetError(
            f"Total {total} outside [{layers * min_budget}, {layers * max_budget}] "
            f"for {layers} layers"
        )

    budgets = [min_budget] * layers
    remaining = total - sum(budgets)
    budgets = [
        min(max(b + round_half_away(float(e[i]) * remaining), min_budget), max_budget)
        for i, b in enumerate(budgets)
    ]

    ceiling = layers * (max_budget - min_budget) + 1
    iterations = 0
    while (delta := total - sum(budgets)) != 0:
        iterations += 1
        if iterations > ceiling:
            raise InfeasibleBudgetError(f"Allocation did not settle within {ceiling} steps")
        if delta > 0:
            candidates = [i for i in range(layers) if budgets[i] < max_budget]
            if not candidates:
                break
            # max() keeps the first of equal keys
            pick = max(candidates, key=lambda i: e[i])
            budgets[pick] += 1
        else:
            candidates = [i for i in range(layers) if budgets[i] > min_budget]
            if not candidates:
                break
            pick = min(candidates, key=lambda i: e[i])
            budgets[pick] -= 1

    logger.debug(f"Allocated {budgets} after {iterations} corrections")
    return BudgetPlan(
        budgets=budgets,
        total=total,
        min_budget=min_budget,
        max_budget=max_budget,
        source="allocated",
        iterations=iterations,
    )


def default_bounds(total: int, layers: int) -> Tuple[int, int]:
    """Floor ``m`` and ceiling ``M = factor * (total // layers)``.

    Raises:
        InfeasibleBudgetError: If ``total < m * layers``
    """
    settings = get_settings()
    m = settings.min_layer_budget
    if layers < 1 or total < m * layers:
        raise InfeasibleBudgetError(
            f"Total budget {total} is below {m} tokens for each of {layers} layers"
        )
    return m, settings.max_budget_factor * (total // layers)


def uniform_plan(total: int, layers: int) -> BudgetPlan:
    """Equal split; the remainder goes to the lowest layers."""
    if layers < 1 or total < layers:
        raise InfeasibleBudgetError(f"Cannot split {total} tokens over {layers} layers")
    base, extra = divmod(total, layers)
    budgets = [base + (1 if i < extra else 0) for i in range(layers)]
    return BudgetPlan(
        budgets=budgets,
        total=total,
        min_budget=min(budgets),
        max_budget=max(budgets),
        source="uniform",
    )
