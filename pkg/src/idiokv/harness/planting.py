"""Single-layer GQA models whose heads realize declared roles on needle tasks.

Key dimensions 0..3 of every KV group read the SINK, TAIL, CONTEXT and PEAK
marker channels; content channels only reach dimensions 4 and up. Queries come
from the CUE channel alone and only fill dimensions 0..3, so every attention
logit is a fixed function of the markers:

* semantic retrieval head ``i``: ``ln 60 - 0.05 i`` on each needle token and
  ``ln 80`` on each sink token. The needle carries most of the mass while the
  row maximum sits on the sink.
* copy-paste head: ``ln 20`` on the middle needle token only.
* streaming head: ``ln 150`` on sink tokens and ``ln 30`` on tail tokens.
* diffuse head: all logits zero.

``W_O`` is block diagonal: head ``h`` writes to hidden dimensions
``[h * head_dim, (h + 1) * head_dim)``, scaled by ``0.7 ** i`` for the ``i``-th
retrieval head and ``0.15`` for every other head.
"""

import math
from typing import List, Tuple

import numpy as np

from ..model import GQAModel, LayerWeights, ModelConfig
from ..numerics import derive_seed, seeded_random_matrix
from .tasks import CONTEXT, CUE, MARKER_CHANNELS, NEEDLE_STRENGTH, PEAK, SINK, TAIL
from .traces import COPY_PASTE, DIFFUSE, SEMANTIC_RETRIEVAL, STREAMING

GROUP_ROLES: Tuple[str, ...] = (
    SEMANTIC_RETRIEVAL,
    SEMANTIC_RETRIEVAL,
    COPY_PASTE,
    COPY_PASTE,
    STREAMING,
    DIFFUSE,
)
PLANTED_GROUP_SIZE = 4
PLANTED_HEAD_DIM = 8

_MARKER_DIMS = {SINK: 0, TAIL: 1, CONTEXT: 2, PEAK: 3}
_RETRIEVAL_DECAY = 0.7
_OTHER_SCALE = 0.15


def planted_roles() -> List[str]:
    """Role of every query head, in head order."""
    return [role for role in GROUP_ROLES for _ in range(PLANTED_GROUP_SIZE)]


def _logit_targets(role: str, rank: int) -> np.ndarray:
    """Logit per marker dimension (SINK, TAIL, CONTEXT, PEAK) for one head."""
    if role == SEMANTIC_RETRIEVAL:
        return np.array([math.log(80), 0.0, (math.log(60) - 0.05 * rank) / NEEDLE_STRENGTH, 0.0])
    if role == COPY_PASTE:
        return np.array([0.0, 0.0, 0.0, math.log(20)])
    if role == STREAMING:
        return np.array([math.log(150), math.log(30), 0.0, 0.0])
    return np.zeros(4)


def build_planted_model(seed: int = 0) -> GQAModel:
    """Planted single-layer model; ``seed`` only affects the content weights."""
    roles = planted_roles()
    num_q = len(roles)
    num_kv = len(GROUP_ROLES)
    d = PLANTED_HEAD_DIM
    hidden = num_q * d
    content = hidden - MARKER_CHANNELS
    config = ModelConfig(num_layers=1, num_q_heads=num_q, num_kv_heads=num_kv, head_dim=d, seed=seed)

    w_q = np.zeros((hidden, num_q * d))
    w_k = np.zeros((hidden, num_kv * d))
    w_v = np.zeros((hidden, num_kv * d))
    w_o = np.zeros((num_q * d, hidden))

    retrieval_rank = 0
    for head, role in enumerate(roles):
        rank = retrieval_rank if role == SEMANTIC_RETRIEVAL else 0
        w_q[CUE, head * d : head * d + 4] = math.sqrt(d) * _logit_targets(role, rank)
        scale = _RETRIEVAL_DECAY**rank if role == SEMANTIC_RETRIEVAL else _OTHER_SCALE
        w_o[head * d : (head + 1) * d, head * d : (head + 1) * d] = scale * np.eye(d)
        if role == SEMANTIC_RETRIEVAL:
            retrieval_rank += 1

    for group in range(num_kv):
        base = group * d
        for channel, dim in _MARKER_DIMS.items():
            w_k[channel, base + dim] = 1.0
            w_v[channel, base + dim] = 1.0
        scale = 1.0 / math.sqrt(content)
        w_k[MARKER_CHANNELS:, base + 4 : base + d] = seeded_random_matrix(
            content, d - 4, derive_seed(seed, group, 0), scale
        )
        w_v[MARKER_CHANNELS:, base + 4 : base + d] = seeded_random_matrix(
            content, d - 4, derive_seed(seed, group, 1), scale
        )

    return GQAModel(
        config=config,
        layers=(LayerWeights(w_q, w_k, w_v, w_o),),
        roles=(tuple(roles),),
    )
