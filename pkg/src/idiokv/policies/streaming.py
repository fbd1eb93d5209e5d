"""Attention-sink plus recent-tokens policy."""

from ..cache import EvictionDecision
from ..errors import InfeasibleBudgetError
from ..model import AttentionTrace
from .base import EvictionPolicy, PolicyParams


def streaming_policy(
    prompt_len: int, budget: int, params: PolicyParams, layer: int = 0
) -> EvictionDecision:
    """Keep the first ``sink`` positions and the last ``budget - sink``.

    Raises:
        InfeasibleBudgetError: If ``budget < sink + window``
    """
    if budget >= prompt_len:
        keep = range(prompt_len)
    else:
        if budget < params.sink + params.window:
            raise InfeasibleBudgetError(
                f"Streaming policy needs budget >= sink + window = "
                f"{params.sink + params.window}, got {budget}"
            )
        keep = list(range(params.sink)) + list(range(prompt_len - (budget - params.sink), prompt_len))
    return EvictionDecision(
        layer=layer, keep_indices=list(keep), prompt_len=prompt_len, window=params.window
    )


class StreamingPolicy(EvictionPolicy):
    """Ignores attention; keeps sink and recent tokens."""

    name = "streaming"

    def decide(self, trace: AttentionTrace, layer: int, budget: int) -> EvictionDecision:
        return streaming_policy(trace.prompt_len, budget, self.params, layer)
