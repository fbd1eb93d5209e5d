"""Base class for token-eviction policies.

A policy maps a prefill attention trace and a per-layer token budget to an
``EvictionDecision``. Custom policies extend ``EvictionPolicy`` and implement
``decide``; they can then be registered with the policy registry.

Example:
    ```python
    from idiokv.policies import EvictionPolicy, get_policy_registry

    class KeepEarliest(EvictionPolicy):
        name = "earliest"

        def decide(self, trace, layer, budget):
            keep = list(range(min(budget, trace.prompt_len)))
            return self.decision(layer, keep, trace.prompt_len, window=0)

    get_policy_registry().register("earliest", KeepEarliest)
    ```
"""

from abc import ABC, abstractmethod
from typing import ClassVar, List, Sequence

import numpy as np
from pydantic import field_validator

from ..cache import EvictionDecision, KVCache
from ..config import PolicySection
from ..errors import InfeasibleBudgetError
from ..heads import HeadScoreTable
from ..logging_config import get_logger
from ..model import AttentionTrace
from ..numerics import avg_pool_1d

logger = get_logger(__name__)


class PolicyParams(PolicySection):
    """Token-selection parameters.

    Defaults come from ``Settings``: window 8, pool_kernel 5, top_k_heads 4,
    sink 4.
    """

    @field_validator("pool_kernel")
    @classmethod
    def kernel_must_be_odd(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError(f"pool_kernel must be odd, got {v}")
        return v


def observation_scores(trace: AttentionTrace, layer: int, heads: Sequence[int], window: int) -> np.ndarray:
    """Per-head prefix scores: the last ``window`` query rows summed per column.

    Returns:
        np.ndarray: Shape (len(heads), prompt_len - window)
    """
    weights = trace.prefill[layer]
    prompt_len = trace.prompt_len
    prefix = prompt_len - window
    block = weights[list(heads), prompt_len - window :, :prefix]
    return block.sum(axis=1)


def sum_in_order(vectors: np.ndarray) -> np.ndarray:
    """Sum rows sequentially, first to last."""
    total = np.zeros(vectors.shape[1])
    for row in vectors:
        total += row
    return total


def top_prefix_positions(scores: np.ndarray, count: int, pool_kernel: int) -> np.ndarray:
    """Indices of the ``count`` best pooled prefix scores, sorted ascending.

    Higher pooled score wins; ties go to the lower index.
    """
    pooled = avg_pool_1d(scores, pool_kernel)
    order = np.lexsort((np.arange(pooled.size), -pooled))
    return np.sort(order[:count])


def require_budget(budget: int, floor: int, what: str) -> None:
    """Raise InfeasibleBudgetError unless ``budget > floor``."""
    if budget <= floor:
        raise InfeasibleBudgetError(f"{what} needs a budget above {floor}, got {budget}")


class EvictionPolicy(ABC):
    """Abstract base class for eviction policies.

    Attributes:
        name: Registry name
        params: Token-selection parameters
        head_table: Head scores, used by head-driven policies
        num_kv_heads: KV groups per layer; query head ``h`` belongs to group
            ``h // (num_heads // num_kv_heads)``
    """

    name: ClassVar[str] = "base"

    def __init__(
        self,
        params: PolicyParams | None = None,
        head_table: HeadScoreTable | None = None,
        num_kv_heads: int = 1,
    ):
        self.params = params or PolicyParams()
        self.head_table = head_table
        self.num_kv_heads = num_kv_heads

    @abstractmethod
    def decide(self, trace: AttentionTrace, layer: int, budget: int) -> EvictionDecision:
        """Choose the prompt positions of ``layer`` to keep under ``budget``.

        Implementations keep ``min(budget, prompt_len)`` positions and keep
        everything when ``budget >= prompt_len``.

        Raises:
            InfeasibleBudgetError: If the budget is below the policy's floor
        """

    def decision(
        self, layer: int, keep: Sequence[int], prompt_len: int, window: int | None = None
    ) -> EvictionDecision:
        """Wrap a keep set into a validated decision."""
        return EvictionDecision(
            layer=layer,
            keep_indices=[int(i) for i in keep],
            prompt_len=prompt_len,
            window=self.params.window if window is None else window,
        )

    def keep_all(self, layer: int, prompt_len: int) -> EvictionDecision:
        return self.decision(layer, range(prompt_len), prompt_len)

    def decide_all(self, trace: AttentionTrace, budgets: Sequence[int]) -> List[EvictionDecision]:
        """One decision per layer.

        Raises:
            InfeasibleBudgetError: If ``budgets`` does not cover every layer
        """
        if len(budgets) != trace.num_layers:
            raise InfeasibleBudgetError(
                f"{len(budgets)} budgets for a trace with {trace.num_layers} layers"
            )
        return [self.decide(trace, layer, int(b)) for layer, b in enumerate(budgets)]

    def compress(
        self, cache: KVCache, trace: AttentionTrace, budgets: Sequence[int]
    ) -> List[EvictionDecision]:
        """Decide for every layer and evict from ``cache`` in place."""
        decisions = self.decide_all(trace, budgets)
        for decision in decisions:
            cache.apply_eviction(decision)
        logger.debug(
            f"{self.name}: retained {cache.memory_report().per_layer} rows per layer"
        )
        return decisions
