"""End-to-end evaluation of eviction policies.

Two substrates are supported:

* a ``GQAModel`` with needle tasks: prefill, evict per plan, teacher-forced
  decode, then compare against the full-cache reference decode. Recall
  accuracy is the fraction of answer steps whose output has cosine
  similarity above ``recall_threshold`` with the reference. This is a
  stand-in for answer accuracy, since toy models have no vocabulary.
* planted traces: only needle retention is measured.

Needle retention for a task is 1 when every layer kept the whole span.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from ..allocator import BudgetPlan
from ..cache import EvictionDecision
from ..config import get_settings
from ..errors import ConfigError, InfeasibleBudgetError
from ..logging_config import get_logger
from ..model import GQAModel, Generation, teacher_forced_decode
from ..numerics import cosine_similarity, frobenius_norm
from ..policies import EvictionPolicy
from .tasks import NeedleTask
from .traces import PlantedTrace

logger = get_logger(__name__)


class TaskOutcome(BaseModel):
    """One task under one (policy, plan)."""

    task: int
    retained: bool
    keep_indices: List[List[int]] = Field(..., description="Per layer")
    accuracy: float | None = Field(default=None, ge=0.0, le=1.0)
    drift: float | None = Field(default=None, ge=0.0)


class PolicyResult(BaseModel):
    policy: str
    plan: str
    budgets: List[int]
    retention_rate: float = Field(..., ge=0.0, le=1.0)
    recall_accuracy: float | None = Field(default=None, ge=0.0, le=1.0)
    drift: float | None = Field(default=None, ge=0.0, description="Mean Frobenius drift")
    outcomes: List[TaskOutcome]


class EvalReport(BaseModel):
    """Metrics for every (policy, plan) pair."""

    substrate: str = Field(..., pattern="^(model|trace)$")
    task_count: int = Field(..., ge=0)
    recall_threshold: float
    model_fingerprint: str | None = None
    results: List[PolicyResult]

    def result(self, policy: str, plan: str | None = None) -> PolicyResult:
        for r in self.results:
            if r.policy == policy and (plan is None or r.plan == plan):
                return r
        raise KeyError(f"No result for policy {policy!r} and plan {plan!r}")


def span_retained(decisions: Sequence[EvictionDecision], span_positions: Sequence[int]) -> bool:
    """True when every layer kept every span position."""
    needed = set(span_positions)
    return all(needed <= set(d.keep_indices) for d in decisions)


def recall_accuracy(outputs: np.ndarray, reference: np.ndarray, threshold: float) -> float:
    """Fraction of rows whose cosine similarity with the reference exceeds ``threshold``."""
    hits = [cosine_similarity(o, r) > threshold for o, r in zip(outputs, reference)]
    return float(np.mean(hits)) if hits else 0.0


def _check_plans(plans: Sequence[BudgetPlan], layers: int) -> None:
    for plan in plans:
        if plan.num_layers != layers:
            raise InfeasibleBudgetError(
                f"{plan.source} plan covers {plan.num_layers} layers, model has {layers}"
            )


def _model_outcome(
    model: GQAModel,
    index: int,
    task: NeedleTask,
    reference: Generation,
    policy: EvictionPolicy,
    plan: BudgetPlan,
    threshold: float,
) -> TaskOutcome:
    decisions: List[EvictionDecision] = []

    def compress(cache, trace) -> None:
        decisions.extend(policy.compress(cache, trace, plan.budgets))

    run = teacher_forced_decode(model, task.prompt_embeddings, task.answer_embeddings, compress)
    return TaskOutcome(
        task=index,
        retained=span_retained(decisions, task.span.positions),
        keep_indices=[d.keep_indices for d in decisions],
        accuracy=recall_accuracy(run.outputs, reference.outputs, threshold),
        drift=frobenius_norm(run.outputs - reference.outputs),
    )


def _summarize(
    policy: EvictionPolicy, plan: BudgetPlan, outcomes: List[TaskOutcome], with_model: bool
) -> PolicyResult:
    retention = float(np.mean([o.retained for o in outcomes])) if outcomes else 0.0
    result = PolicyResult(
        policy=policy.name,
        plan=plan.source,
        budgets=plan.budgets,
        retention_rate=retention,
        outcomes=outcomes,
    )
    if with_model and outcomes:
        result.recall_accuracy = float(np.mean([o.accuracy for o in outcomes]))
        result.drift = float(np.mean([o.drift for o in outcomes]))
    logger.info(
        f"{policy.name}/{plan.source}: retention={result.retention_rate:.3f} "
        f"accuracy={result.recall_accuracy} drift={result.drift}"
    )
    return result


def evaluate_model(
    model: GQAModel,
    policies: Sequence[EvictionPolicy],
    plans: Sequence[BudgetPlan],
    tasks: Sequence[NeedleTask],
    recall_threshold: float | None = None,
    workers: int | None = None,
) -> EvalReport:
    """Evaluate every (policy, plan) pair on a model over needle tasks."""
    settings = get_settings()
    threshold = settings.recall_threshold if recall_threshold is None else recall_threshold
    workers = workers or settings.workers
    _check_plans(plans, model.config.num_layers)

    def references(task: NeedleTask) -> Generation:
        return teacher_forced_decode(model, task.prompt_embeddings, task.answer_embeddings)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        refs = list(pool.map(references, tasks))
        results = []
        for policy in policies:
            for plan in plans:
                jobs: List[Tuple[int, NeedleTask, Generation]] = list(
                    zip(range(len(tasks)), tasks, refs)
                )
                outcomes = list(
                    pool.map(
                        lambda job: _model_outcome(
                            model, job[0], job[1], job[2], policy, plan, threshold
                        ),
                        jobs,
                    )
                )
                results.append(_summarize(policy, plan, outcomes, with_model=True))

    return EvalReport(
        substrate="model",
        task_count=len(tasks),
        recall_threshold=threshold,
        model_fingerprint=model.fingerprint(),
        results=results,
    )


def evaluate_traces(
    traces: Sequence[PlantedTrace],
    policies: Sequence[EvictionPolicy],
    plans: Sequence[BudgetPlan],
) -> EvalReport:
    """Needle retention of every (policy, plan) pair on planted traces."""
    if traces:
        _check_plans(plans, traces[0].trace.num_layers)
    results = []
    for policy in policies:
        for plan in plans:
            outcomes = []
            for index, planted in enumerate(traces):
                decisions = policy.decide_all(planted.trace, plan.budgets)
                outcomes.append(
                    TaskOutcome(
                        task=index,
                        retained=span_retained(decisions, planted.span.positions),
                        keep_indices=[d.keep_indices for d in decisions],
                    )
                )
            results.append(_summarize(policy, plan, outcomes, with_model=False))
    return EvalReport(
        substrate="trace",
        task_count=len(traces),
        recall_threshold=get_settings().recall_threshold,
        results=results,
    )


def run_eval(
    target: GQAModel | Sequence[PlantedTrace],
    policies: Sequence[EvictionPolicy],
    plans: Sequence[BudgetPlan],
    tasks: Sequence[NeedleTask] | None = None,
    recall_threshold: float | None = None,
) -> EvalReport:
    """Evaluate policies on a model (with tasks) or on planted traces.

    Raises:
        ConfigError: If a model is given without tasks
        InfeasibleBudgetError: If a plan does not match the layer count
    """
    if isinstance(target, GQAModel):
        if tasks is None:
            raise ConfigError("Model evaluation needs needle tasks")
        return evaluate_model(target, policies, plans, tasks, recall_threshold)
    return evaluate_traces(list(target), policies, plans)
