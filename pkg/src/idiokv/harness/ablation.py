"""Head-masking and head-count ablations."""

import csv
import io
from typing import Dict, List, Sequence

import numpy as np
from pydantic import BaseModel, Field

from ..allocator import BudgetPlan
from ..config import get_settings
from ..errors import HeadScoreError
from ..heads import HeadScoreTable, mask_heads, select_top_heads_global
from ..logging_config import get_logger
from ..model import GQAModel, HeadId, teacher_forced_decode
from ..policies import CompressKVPolicy, PolicyParams
from .evaluation import recall_accuracy, run_eval
from .tasks import NeedleTask
from .traces import PlantedTrace

logger = get_logger(__name__)

SEMANTIC_ARM = "semantic_retrieval"
COPY_PASTE_ARM = "copy_paste"
CONTROL_ARM = "random_control"


class AblationCurve(BaseModel):
    kind: str
    k_values: List[int]
    accuracy: List[float]
    masked_heads: List[List[List[int]]] = Field(..., description="Per k, the masked (layer, head) pairs")


class AblationReport(BaseModel):
    """Recall accuracy as more heads of each kind are masked."""

    baseline_accuracy: float
    recall_threshold: float
    task_count: int
    curves: List[AblationCurve]

    def curve(self, kind: str) -> AblationCurve:
        for c in self.curves:
            if c.kind == kind:
                return c
        raise KeyError(f"No curve {kind!r}")

    def to_csv(self) -> str:
        """``kind,k,accuracy`` rows."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "k", "accuracy"])
        for c in self.curves:
            for k, acc in zip(c.k_values, c.accuracy):
                writer.writerow([c.kind, k, repr(acc)])
        return buf.getvalue()


def ablation_head_sets(
    table: HeadScoreTable, k_max: int, seed: int
) -> Dict[str, List[HeadId]]:
    """Ranked head lists for each arm, each at least ``k_max`` long.

    * semantic: global semantic ranking.
    * copy-paste: copy-paste ranking among heads outside the top ``k_max``
      semantic heads with a positive copy-paste score.
    * control: seeded shuffle of heads outside the top ``k_max`` semantic heads
      whose copy-paste score is zero.

    Raises:
        HeadScoreError: If an arm has fewer than ``k_max`` heads
    """
    semantic = select_top_heads_global(table, k_max, "semantic")
    excluded = set(semantic)

    ranked_cp = select_top_heads_global(table, table.num_layers * table.num_heads, "copy_paste")
    copy_paste = [h for h in ranked_cp if h not in excluded and table.copy_paste[h] > 0]

    others = [h for h in ranked_cp if h not in excluded and table.copy_paste[h] == 0]
    others.sort()
    rng = np.random.default_rng(seed)
    control = [others[i] for i in rng.permutation(len(others))]

    arms = {SEMANTIC_ARM: semantic, COPY_PASTE_ARM: copy_paste, CONTROL_ARM: control}
    for name, heads in arms.items():
        if len(heads) < k_max:
            raise HeadScoreError(f"Only {len(heads)} {name} heads available for k={k_max}")
    return arms


def run_masking_ablation(
    model: GQAModel,
    head_table: HeadScoreTable,
    k_values: Sequence[int],
    tasks: Sequence[NeedleTask],
    seed: int = 0,
    recall_threshold: float | None = None,
) -> AblationReport:
    """Mask the top-k heads of each kind and measure full-cache recall accuracy.

    Accuracy compares each masked model's answer-step outputs with the
    unmasked model's.

    Raises:
        HeadScoreError: If a k is negative or exceeds the available heads
    """
    threshold = get_settings().recall_threshold if recall_threshold is None else recall_threshold
    total = model.config.num_layers * model.config.num_q_heads
    bad = [k for k in k_values if k < 0 or k > total]
    if bad:
        raise HeadScoreError(f"k values {bad} outside [0, {total}]")
    k_max = max(k_values, default=0)
    arms = ablation_head_sets(head_table, k_max, seed)

    references = [
        teacher_forced_decode(model, t.prompt_embeddings, t.answer_embeddings).outputs
        for t in tasks
    ]

    def accuracy(masked: GQAModel) -> float:
        scores = [
            recall_accuracy(
                teacher_forced_decode(masked, t.prompt_embeddings, t.answer_embeddings).outputs,
                ref,
                threshold,
            )
            for t, ref in zip(tasks, references)
        ]
        return float(np.mean(scores)) if scores else 0.0

    baseline = accuracy(model)
    curves = []
    for kind, ranked in arms.items():
        values, masked_sets = [], []
        for k in k_values:
            heads = ranked[:k]
            values.append(baseline if k == 0 else accuracy(mask_heads(model, heads)))
            masked_sets.append([list(h) for h in heads])
        curves.append(
            AblationCurve(kind=kind, k_values=list(k_values), accuracy=values, masked_heads=masked_sets)
        )
        logger.info(f"Masking {kind}: {dict(zip(k_values, values))}")

    return AblationReport(
        baseline_accuracy=baseline,
        recall_threshold=threshold,
        task_count=len(tasks),
        curves=curves,
    )


class HeadCountRow(BaseModel):
    top_k_heads: int
    retention_rate: float
    recall_accuracy: float | None = None


class HeadCountReport(BaseModel):
    budgets: List[int]
    rows: List[HeadCountRow]


def run_head_count_ablation(
    target: GQAModel | Sequence[PlantedTrace],
    head_table: HeadScoreTable,
    counts: Sequence[int],
    plan: BudgetPlan,
    tasks: Sequence[NeedleTask] | None = None,
    params: PolicyParams | None = None,
) -> HeadCountReport:
    """Retention and accuracy of compresskv as the number of selected heads varies."""
    base = params or PolicyParams()
    rows = []
    for count in counts:
        policy = CompressKVPolicy(base.model_copy(update={"top_k_heads": count}), head_table)
        result = run_eval(target, [policy], [plan], tasks).results[0]
        rows.append(
            HeadCountRow(
                top_k_heads=count,
                retention_rate=result.retention_rate,
                recall_accuracy=result.recall_accuracy,
            )
        )
    return HeadCountReport(budgets=plan.budgets, rows=rows)
