"""Observation-window clustering policy, per KV group or layer-unified.

Each KV group scores prefix positions by the attention its heads pay from the
last ``window`` prompt rows. The layer-unified decision adds the group scores
together so it can run against layer-unified storage; the per-group variant
emits one decision per KV head.
"""

from typing import List

import numpy as np

from ..cache import EvictionDecision
from ..errors import ShapeError
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


def group_scores(
    trace: AttentionTrace, layer: int, params: PolicyParams, num_kv_heads: int = 1
) -> np.ndarray:
    """Summed window scores per KV group, shape (num_kv_heads, prefix_len).

    Masked heads contribute nothing.
    """
    heads = trace.num_heads
    if heads % num_kv_heads != 0:
        raise ShapeError(f"{heads} heads cannot form {num_kv_heads} KV groups")
    size = heads // num_kv_heads
    active = set(trace.active_heads(layer))
    prefix = trace.prompt_len - params.window
    scores = np.zeros((num_kv_heads, prefix))
    for group in range(num_kv_heads):
        members = [h for h in range(group * size, (group + 1) * size) if h in active]
        if members:
            scores[group] = sum_in_order(observation_scores(trace, layer, members, params.window))
    return scores


def _keep_set(scores: np.ndarray, budget: int, prompt_len: int, params: PolicyParams) -> List[int]:
    kept = top_prefix_positions(scores, budget - params.window, params.pool_kernel)
    window = np.arange(prompt_len - params.window, prompt_len)
    return np.concatenate([kept, window]).tolist()


def snapkv_policy(
    trace: AttentionTrace,
    layer: int,
    budget: int,
    params: PolicyParams,
    num_kv_heads: int = 1,
) -> EvictionDecision:
    """Layer-unified decision from group scores summed across groups.

    Raises:
        InfeasibleBudgetError: If ``budget <= window`` and the prompt must shrink
    """
    prompt_len = trace.prompt_len
    if budget >= prompt_len:
        keep = list(range(prompt_len))
    else:
        require_budget(budget, params.window, "snapkv")
        layer_scores = sum_in_order(group_scores(trace, layer, params, num_kv_heads))
        keep = _keep_set(layer_scores, budget, prompt_len, params)
    return EvictionDecision(
        layer=layer, keep_indices=keep, prompt_len=prompt_len, window=params.window
    )


def snapkv_group_decisions(
    trace: AttentionTrace,
    layer: int,
    budget: int,
    params: PolicyParams,
    num_kv_heads: int = 1,
) -> List[EvictionDecision]:
    """One decision per KV group, each ranked by its own group score.

    These carry ``kv_head`` and cannot be applied to layer-unified storage.
    """
    prompt_len = trace.prompt_len
    if budget >= prompt_len:
        keeps = [list(range(prompt_len))] * num_kv_heads
    else:
        require_budget(budget, params.window, "snapkv")
        scores = group_scores(trace, layer, params, num_kv_heads)
        keeps = [_keep_set(row, budget, prompt_len, params) for row in scores]
    return [
        EvictionDecision(
            layer=layer, keep_indices=keep, prompt_len=prompt_len, window=params.window, kv_head=g
        )
        for g, keep in enumerate(keeps)
    ]


class SnapKVPolicy(EvictionPolicy):
    """Layer-unified group-sum selection."""

    name = "snapkv"

    def decide(self, trace: AttentionTrace, layer: int, budget: int) -> EvictionDecision:
        return snapkv_policy(trace, layer, budget, self.params, self.num_kv_heads)
