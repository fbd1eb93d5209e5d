"""Attention traces built directly from declared head behaviors.

Each head gets a label and every row it emits mixes a few mass components:

* ``streaming``: the sink tokens and the last ``window`` positions the row
  can see (its own token included), plus a little diffuse mass.
* ``semantic_retrieval``: the needle span and two neighbours on each side,
  the sink tokens, and some diffuse mass. Each region position receives less
  than a sink position, so the row maximum stays on the sink.
* ``copy_paste``: a sharp peak on the middle needle token, some sink mass and
  a diffuse floor.
* ``diffuse``: uniform over everything visible.

Component masses are jittered once per head by up to 10%. Components that the
row cannot see yet (causality) are dropped and the row is renormalized.

Every trace is checked against its labels before it is returned: streaming
rows keep at least ``STREAMING_FLOOR`` of their mass on the sink and recent
positions, and retrieval heads keep at least ``RETRIEVAL_FLOOR`` of every
answer-step row on the span and its neighbours.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from ..errors import ConfigError
from ..heads import AnswerSpan
from ..logging_config import get_logger
from ..model import AttentionTrace, HeadId

logger = get_logger(__name__)

STREAMING = "streaming"
COPY_PASTE = "copy_paste"
SEMANTIC_RETRIEVAL = "semantic_retrieval"
DIFFUSE = "diffuse"
HEAD_ROLES = (STREAMING, COPY_PASTE, SEMANTIC_RETRIEVAL, DIFFUSE)

ROLE_MASSES: Dict[str, Dict[str, float]] = {
    STREAMING: {"sink": 0.35, "recent": 0.6, "diffuse": 0.05},
    SEMANTIC_RETRIEVAL: {"region": 0.58, "sink": 0.32, "diffuse": 0.1},
    COPY_PASTE: {"peak": 0.3, "sink": 0.2, "diffuse": 0.5},
    DIFFUSE: {"diffuse": 1.0},
}
COMPONENTS = ("sink", "recent", "region", "peak", "diffuse")
JITTER = 0.1
REGION_PAD = 2
STREAMING_FLOOR = 0.8
RETRIEVAL_FLOOR = 0.5


@dataclass
class PlantedTrace:
    """A trace plus the labels it was built from."""

    trace: AttentionTrace
    labels: List[List[str]]
    span: AnswerSpan
    generated_ids: Tuple[int, ...]
    sink: int
    window: int

    def heads_with(self, role: str) -> List[HeadId]:
        return [
            (layer, head)
            for layer, row in enumerate(self.labels)
            for head, label in enumerate(row)
            if label == role
        ]

    def region(self) -> Tuple[int, int]:
        """Half-open bounds of the span plus its neighbours."""
        start, end = self.span.positions[0], self.span.positions[-1] + 1
        return max(0, start - REGION_PAD), end + REGION_PAD

    def rows(self, layer: int, head: int) -> List[np.ndarray]:
        """Every row of one head: prefill rows (trimmed to what they see), then decode rows."""
        prefill = self.trace.prefill[layer][head]
        rows = [prefill[i, : i + 1] for i in range(prefill.shape[0])]
        return rows + [step[layer][head] for step in self.trace.decode]


def _components(width: int, span: AnswerSpan, sink: int, window: int) -> Dict[str, np.ndarray]:
    start, end = span.positions[0], span.positions[-1] + 1
    peak = start + (end - start) // 2
    visible = np.arange(width)
    return {
        "sink": visible[: min(sink, width)],
        "recent": visible[max(0, width - window) :],
        "region": visible[max(0, start - REGION_PAD) : min(width, end + REGION_PAD)],
        "peak": visible[peak : peak + 1] if peak < width else visible[:0],
        "diffuse": visible,
    }


def _row(masses: Dict[str, float], parts: Dict[str, np.ndarray], width: int) -> np.ndarray:
    row = np.zeros(width)
    for name, mass in masses.items():
        cols = parts[name]
        if cols.size:
            row[cols] += mass / cols.size
    return row / row.sum()


def streaming_share(row: np.ndarray, sink: int, window: int) -> float:
    """Mass of one row on the sink tokens and its last ``window`` positions."""
    width = row.size
    keep = np.zeros(width, dtype=bool)
    keep[: min(sink, width)] = True
    keep[max(0, width - window) :] = True
    return float(row[keep].sum())


def check_label_invariants(planted: PlantedTrace) -> None:
    """Raise ConfigError when any head's rows contradict its label."""
    lo, hi = planted.region()
    prompt_len = planted.trace.prompt_len
    for layer, head in planted.heads_with(STREAMING):
        worst = min(streaming_share(r, planted.sink, planted.window) for r in planted.rows(layer, head))
        if worst < STREAMING_FLOOR:
            raise ConfigError(
                f"Streaming head {(layer, head)} keeps only {worst:.3f} of a row on sink and "
                f"recent tokens (needs {STREAMING_FLOOR})"
            )
    for layer, head in planted.heads_with(SEMANTIC_RETRIEVAL):
        answer_rows = planted.rows(layer, head)[prompt_len:]
        worst = min((float(r[lo:hi].sum()) for r in answer_rows), default=1.0)
        if worst < RETRIEVAL_FLOOR:
            raise ConfigError(
                f"Retrieval head {(layer, head)} keeps only {worst:.3f} of an answer row on the "
                f"span and its neighbours (needs {RETRIEVAL_FLOOR})"
            )


def _role_masses(overrides: Mapping[str, Mapping[str, float]] | None) -> Dict[str, Dict[str, float]]:
    masses = {role: dict(parts) for role, parts in ROLE_MASSES.items()}
    for role, parts in (overrides or {}).items():
        if role not in masses:
            raise ConfigError(f"Unknown head label {role!r}; expected {HEAD_ROLES}")
        unknown = set(parts) - set(COMPONENTS)
        if unknown or any(v < 0 for v in parts.values()) or sum(parts.values()) <= 0:
            raise ConfigError(f"Bad masses for {role}: {dict(parts)}")
        masses[role] = dict(parts)
    return masses


def generate_planted_trace(
    labels: Sequence[Sequence[str]],
    seq_len: int,
    window: int,
    span: AnswerSpan | Tuple[int, int],
    seed: int,
    sink: int = 4,
    decode_steps: int | None = None,
    masses: Mapping[str, Mapping[str, float]] | None = None,
) -> PlantedTrace:
    """Build a trace whose heads follow ``labels``.

    Args:
        labels: Per layer, one role per head; every layer has the same count
        seq_len: Prompt length
        window: Observation window
        span: Answer span, or ``(start, length)``
        seed: Jitter seed
        sink: Number of sink tokens
        decode_steps: Answer steps to append (default: span length); each
            emits a correct answer id
        masses: Per-role component masses replacing ``ROLE_MASSES`` entries

    Raises:
        ConfigError: For unknown labels, ragged layers, a span that overlaps
            the sink or window, or masses that break a label's invariant
    """
    if not labels or len({len(row) for row in labels}) != 1 or not labels[0]:
        raise ConfigError("Labels must give the same non-zero number of heads in every layer")
    unknown = {label for row in labels for label in row} - set(HEAD_ROLES)
    if unknown:
        raise ConfigError(f"Unknown head labels {sorted(unknown)}; expected {HEAD_ROLES}")
    if not isinstance(span, AnswerSpan):
        start, length = span
        span = AnswerSpan(
            tuple(range(start, start + length)), frozenset(range(1000, 1000 + length))
        )
    if span.positions[0] < sink or span.positions[-1] >= seq_len - window:
        raise ConfigError(
            f"Span {span.positions[0]}..{span.positions[-1]} must avoid the first {sink} "
            f"and last {window} of {seq_len} positions"
        )
    role_masses = _role_masses(masses)

    rng = np.random.default_rng(seed)
    steps = len(span.positions) if decode_steps is None else decode_steps
    answer_ids = sorted(span.answer_token_ids) or [0]
    generated = tuple(answer_ids[t % len(answer_ids)] for t in range(steps))

    layers, heads = len(labels), len(labels[0])
    jittered = [
        [
            {k: v * rng.uniform(1 - JITTER, 1 + JITTER) for k, v in role_masses[label].items()}
            for label in row
        ]
        for row in labels
    ]

    prefill = [np.zeros((heads, seq_len, seq_len)) for _ in range(layers)]
    for i in range(seq_len):
        parts = _components(i + 1, span, sink, window)
        for layer in range(layers):
            for head in range(heads):
                prefill[layer][head, i, : i + 1] = _row(jittered[layer][head], parts, i + 1)

    trace = AttentionTrace(prefill=prefill)
    for t in range(steps):
        width = seq_len + t + 1
        parts = _components(width, span, sink, window)
        rows = [
            np.stack([_row(jittered[layer][head], parts, width) for head in range(heads)])
            for layer in range(layers)
        ]
        trace.add_decode_step(rows, [np.arange(width)] * layers)

    planted = PlantedTrace(trace, [list(row) for row in labels], span, generated, sink, window)
    check_label_invariants(planted)
    logger.debug(f"Planted trace: {layers} layers x {heads} heads, L={seq_len}, span={span.positions}")
    return planted


def battery_labels(groups: int = 4, streaming_per_group: int = 3, layers: int = 1) -> List[List[str]]:
    """Every KV group: several streaming heads followed by one retrieval head."""
    row = ([STREAMING] * streaming_per_group + [SEMANTIC_RETRIEVAL]) * groups
    return [list(row) for _ in range(layers)]


def identification_labels(
    seed: int, layers: int = 2, retrieval: int = 4, streaming: int = 2, diffuse: int = 2
) -> List[List[str]]:
    """Per layer, retrieval heads hidden among streaming and diffuse heads in seeded order."""
    rng = np.random.default_rng(seed)
    base = [SEMANTIC_RETRIEVAL] * retrieval + [STREAMING] * streaming + [DIFFUSE] * diffuse
    return [[base[i] for i in rng.permutation(len(base))] for _ in range(layers)]


def battery_trace(seed: int, seq_len: int = 200, window: int = 8, span_len: int = 6, sink: int = 4) -> PlantedTrace:
    """One trace of the streaming-dominated group battery with a seeded needle position."""
    rng = np.random.default_rng(seed)
    start = int(rng.integers(sink, seq_len - window - span_len + 1))
    return generate_planted_trace(
        battery_labels(), seq_len, window, (start, span_len), seed, sink=sink
    )
