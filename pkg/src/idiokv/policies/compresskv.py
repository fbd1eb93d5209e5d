"""Token selection driven by semantic retrieval heads.

Only the top-scoring heads of each layer (by semantic-retrieval score) vote.
Their window scores are combined across heads, pooled, and the best prefix
positions are kept together with the observation window. Every KV head of the
layer shares the decision.

The combination is a mean over a fixed number of heads, so ranking uses the
sum directly; the two orders are identical and the sum keeps exact ties
exact.
"""

from typing import List

from ..cache import EvictionDecision
from ..errors import HeadScoreError
from ..heads import HeadScoreTable, select_top_heads
from ..logging_config import get_logger
from ..model import AttentionTrace
from .base import (
    EvictionPolicy,
    PolicyParams,
    observation_scores,
    require_budget,
    sum_in_order,
    top_prefix_positions,
)

logger = get_logger(__name__)


def selected_heads(
    trace: AttentionTrace, layer: int, params: PolicyParams, head_table: HeadScoreTable | None
) -> List[int]:
    """Top heads of ``layer`` among those not masked in the trace.

    Raises:
        HeadScoreError: If the table is missing or does not cover the layer
    """
    if head_table is None:
        raise HeadScoreError("compresskv needs a head score table")
    if layer >= head_table.num_layers or head_table.num_heads != trace.num_heads:
        raise HeadScoreError(
            f"Head table ({head_table.num_layers} x {head_table.num_heads}) does not cover "
            f"layer {layer} of a trace with {trace.num_heads} heads"
        )
    active = trace.active_heads(layer)
    if not active:
        raise HeadScoreError(f"Every head of layer {layer} is masked")
    k = min(params.top_k_heads, len(active))
    return select_top_heads(head_table, layer, k, candidates=active)


def compresskv_policy(
    trace: AttentionTrace,
    layer: int,
    budget: int,
    params: PolicyParams,
    head_table: HeadScoreTable | None,
) -> EvictionDecision:
    """Layer-unified decision from the selected heads' window scores.

    Raises:
        InfeasibleBudgetError: If ``budget <= window`` and the prompt must shrink
        HeadScoreError: If head scores are missing
    """
    prompt_len = trace.prompt_len
    heads = selected_heads(trace, layer, params, head_table)
    if budget >= prompt_len:
        keep = list(range(prompt_len))
    else:
        require_budget(budget, params.window, "compresskv")
        # ascending head order, matching the group sums of snapkv
        per_head = observation_scores(trace, layer, sorted(heads), params.window)
        combined = sum_in_order(per_head)
        kept = top_prefix_positions(combined, budget - params.window, params.pool_kernel)
        keep = kept.tolist() + list(range(prompt_len - params.window, prompt_len))
        logger.debug(f"Layer {layer}: heads {heads} kept {len(keep)} of {prompt_len}")
    return EvictionDecision(
        layer=layer, keep_indices=keep, prompt_len=prompt_len, window=params.window
    )


class CompressKVPolicy(EvictionPolicy):
    """Semantic-retrieval-head driven, layer-unified selection."""

    name = "compresskv"

    def decide(self, trace: AttentionTrace, layer: int, budget: int) -> EvictionDecision:
        return compresskv_policy(trace, layer, budget, self.params, self.head_table)
