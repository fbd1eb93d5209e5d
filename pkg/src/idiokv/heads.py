"""Head scoring: semantic-retrieval and copy-paste-retrieval behavior.

A head's semantic-retrieval score sums, over decode steps whose emitted token
belongs to the answer, the attention mass the head puts on the whole answer
span. Its copy-paste score is the fraction of those steps where the head's
single strongest position falls inside the span.

Scores are computed from teacher-forced traces: the emitted token at step
``t`` is the task's ``t``-th answer id.
"""

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import singledispatch
from pathlib import Path
from typing import TYPE_CHECKING, FrozenSet, Iterable, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .config import get_settings
from .errors import ArtifactError, HeadScoreError
from .logging_config import get_logger
from .model import AttentionTrace, GQAModel, HeadId, teacher_forced_decode

if TYPE_CHECKING:
    from .harness.tasks import NeedleTask

logger = get_logger(__name__)

SCORE_KINDS = ("semantic", "copy_paste")


@dataclass(frozen=True)
class AnswerSpan:
    """Prompt positions holding the answer plus the ids counted as correct."""

    positions: Tuple[int, ...]
    answer_token_ids: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not self.positions:
            raise HeadScoreError("Answer span must contain at least one position")
        ordered = tuple(sorted(set(int(p) for p in self.positions)))
        if ordered[0] < 0:
            raise HeadScoreError(f"Answer span has negative position {ordered[0]}")
        object.__setattr__(self, "positions", ordered)
        object.__setattr__(self, "answer_token_ids", frozenset(int(i) for i in self.answer_token_ids))

    def check_within(self, length: int) -> None:
        """Raise HeadScoreError unless every position is below ``length``."""
        if self.positions[-1] >= length:
            raise HeadScoreError(
                f"Answer span position {self.positions[-1]} exceeds trace width {length}"
            )


class HeadScoreRecord(BaseModel):
    layer: int = Field(..., ge=0)
    head: int = Field(..., ge=0)
    semantic_score: float = Field(..., ge=0.0)
    copy_paste_score: float = Field(..., ge=0.0)


class HeadScoreDocument(BaseModel):
    """JSON form of a HeadScoreTable."""

    num_layers: int = Field(..., ge=1)
    num_heads: int = Field(..., ge=1)
    model_fingerprint: str | None = None
    prompt_count: int = Field(default=0, ge=0)
    records: List[HeadScoreRecord]


@dataclass
class HeadScoreTable:
    """Per-(layer, head) scores, arrays of shape (num_layers, num_heads)."""

    semantic: np.ndarray
    copy_paste: np.ndarray
    prompt_count: int = 1
    model_fingerprint: str | None = None

    def __post_init__(self) -> None:
        self.semantic = np.asarray(self.semantic, dtype=np.float64)
        self.copy_paste = np.asarray(self.copy_paste, dtype=np.float64)
        if self.semantic.ndim != 2 or self.semantic.shape != self.copy_paste.shape:
            raise HeadScoreError(
                f"Score arrays must share a 2-D shape, got {self.semantic.shape} "
                f"and {self.copy_paste.shape}"
            )
        for name in SCORE_KINDS:
            arr = self.scores(name)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise HeadScoreError(f"{name} scores must be finite and non-negative")

    @classmethod
    def zeros(cls, num_layers: int, num_heads: int) -> "HeadScoreTable":
        shape = (num_layers, num_heads)
        return cls(np.zeros(shape), np.zeros(shape), prompt_count=0)

    @property
    def num_layers(self) -> int:
        return int(self.semantic.shape[0])

    @property
    def num_heads(self) -> int:
        return int(self.semantic.shape[1])

    def scores(self, kind: str = "semantic") -> np.ndarray:
        if kind == "semantic":
            return self.semantic
        if kind == "copy_paste":
            return self.copy_paste
        raise HeadScoreError(f"Unknown score kind {kind!r}; expected one of {SCORE_KINDS}")

    def merge(self, other: "HeadScoreTable") -> "HeadScoreTable":
        """Sum two tables computed on different calibration prompts."""
        if self.semantic.shape != other.semantic.shape:
            raise HeadScoreError(
                f"Cannot merge tables of shape {self.semantic.shape} and {other.semantic.shape}"
            )
        return HeadScoreTable(
            self.semantic + other.semantic,
            self.copy_paste + other.copy_paste,
            prompt_count=self.prompt_count + other.prompt_count,
            model_fingerprint=self.model_fingerprint or other.model_fingerprint,
        )

    def normalized(self, kind: str = "semantic") -> np.ndarray:
        """Per-layer L1-normalized scores; all-zero layers stay zero."""
        arr = self.scores(kind)
        totals = arr.sum(axis=1, keepdims=True)
        return np.divide(arr, totals, out=np.zeros_like(arr), where=totals > 0)

    def to_document(self) -> HeadScoreDocument:
        records = [
            HeadScoreRecord(
                layer=layer,
                head=head,
                semantic_score=float(self.semantic[layer, head]),
                copy_paste_score=float(self.copy_paste[layer, head]),
            )
            for layer in range(self.num_layers)
            for head in range(self.num_heads)
        ]
        return HeadScoreDocument(
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            model_fingerprint=self.model_fingerprint,
            prompt_count=self.prompt_count,
            records=records,
        )

    @classmethod
    def from_document(cls, doc: HeadScoreDocument) -> "HeadScoreTable":
        table = cls.zeros(doc.num_layers, doc.num_heads)
        seen = set()
        for rec in doc.records:
            if rec.layer >= doc.num_layers or rec.head >= doc.num_heads:
                raise HeadScoreError(f"Record ({rec.layer}, {rec.head}) is out of range")
            table.semantic[rec.layer, rec.head] = rec.semantic_score
            table.copy_paste[rec.layer, rec.head] = rec.copy_paste_score
            seen.add((rec.layer, rec.head))
        if len(seen) != doc.num_layers * doc.num_heads:
            raise HeadScoreError("Head score document does not cover every (layer, head)")
        table.prompt_count = doc.prompt_count
        table.model_fingerprint = doc.model_fingerprint
        return table

    def save_json(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_document().model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load_json(cls, path: Path | str) -> "HeadScoreTable":
        try:
            doc = HeadScoreDocument.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ArtifactError(f"Cannot read head scores {path}: {e}") from e
        return cls.from_document(doc)

    def to_csv(self, kind: str = "semantic") -> str:
        """Layer-by-head grid of normalized scores, one row per layer."""
        grid = self.normalized(kind)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer"] + [f"head{h}" for h in range(self.num_heads)])
        for layer, row in enumerate(grid):
            writer.writerow([layer] + [repr(float(v)) for v in row])
        return buf.getvalue()


def _qualifying_steps(trace: AttentionTrace, generated: Sequence[int], span: AnswerSpan) -> List[int]:
    if len(generated) != trace.num_steps:
        raise HeadScoreError(
            f"{len(generated)} generated ids for a trace with {trace.num_steps} decode steps"
        )
    span.check_within(trace.prompt_len)
    return [t for t, token in enumerate(generated) if int(token) in span.answer_token_ids]


def _span_columns(positions: np.ndarray, span: AnswerSpan) -> np.ndarray:
    """Row columns holding span positions; evicted positions are skipped."""
    return np.flatnonzero(np.isin(positions, span.positions))


def semantic_retrieval_score(
    trace: AttentionTrace, generated: Sequence[int], span: AnswerSpan
) -> np.ndarray:
    """Attention mass on the answer span, summed over answer-emitting steps.

    Args:
        trace: Trace with one decode step per generated id
        generated: Emitted token id per decode step
        span: Answer positions and correct ids

    Returns:
        np.ndarray: Scores of shape (num_layers, num_heads)

    Raises:
        HeadScoreError: If the span exceeds the trace or step counts disagree
    """
    steps = _qualifying_steps(trace, generated, span)
    scores = np.zeros((trace.num_layers, trace.num_heads))
    for t in steps:
        for layer in range(trace.num_layers):
            rows = trace.decode[t][layer]
            # column order follows span order so sums are reproducible
            for col in _span_columns(trace.decode_positions[t][layer], span):
                scores[layer] += rows[:, col]
    return scores


def copy_paste_retrieval_score(
    trace: AttentionTrace, generated: Sequence[int], span: AnswerSpan
) -> np.ndarray:
    """Fraction of answer-emitting steps whose strongest position is in the span.

    Ties in the row maximum resolve to the earliest column. Returns zeros when
    no step qualifies.
    """
    steps = _qualifying_steps(trace, generated, span)
    hits = np.zeros((trace.num_layers, trace.num_heads))
    if not steps:
        return hits
    for t in steps:
        for layer in range(trace.num_layers):
            rows = trace.decode[t][layer]
            top = trace.decode_positions[t][layer][np.argmax(rows, axis=1)]
            hits[layer] += np.isin(top, span.positions)
    return hits / len(steps)


def score_heads(
    trace: AttentionTrace,
    generated: Sequence[int],
    span: AnswerSpan,
    model_fingerprint: str | None = None,
) -> HeadScoreTable:
    """Both scores for a single calibration prompt."""
    return HeadScoreTable(
        semantic_retrieval_score(trace, generated, span),
        copy_paste_retrieval_score(trace, generated, span),
        prompt_count=1,
        model_fingerprint=model_fingerprint,
    )


def select_top_heads(
    table: HeadScoreTable,
    layer: int,
    k: int,
    candidates: Iterable[int] | None = None,
) -> List[int]:
    """The ``k`` heads of ``layer`` with the highest semantic score.

    Ties go to the lower head index.

    Args:
        table: Head scores
        layer: Layer to rank
        k: Number of heads, 1 <= k <= number of candidates
        candidates: Heads allowed to be picked (default: all)

    Raises:
        HeadScoreError: If the layer is not covered or ``k`` is out of range
    """
    if not 0 <= layer < table.num_layers:
        raise HeadScoreError(f"Head table has no layer {layer}")
    pool = np.arange(table.num_heads) if candidates is None else np.array(sorted(candidates))
    if not 1 <= k <= pool.size:
        raise HeadScoreError(f"k={k} must lie in [1, {pool.size}]")
    scores = table.semantic[layer, pool]
    order = np.lexsort((pool, -scores))
    return [int(h) for h in pool[order[:k]]]


def select_top_heads_global(table: HeadScoreTable, k: int, kind: str = "semantic") -> List[HeadId]:
    """The ``k`` highest-scoring (layer, head) pairs across the whole model.

    Ties go to the lower layer, then the lower head.
    """
    total = table.num_layers * table.num_heads
    if not 0 <= k <= total:
        raise HeadScoreError(f"k={k} exceeds the {total} heads of the model")
    flat = table.scores(kind).reshape(-1)
    order = np.lexsort((np.arange(flat.size), -flat))[:k]
    return [(int(i) // table.num_heads, int(i) % table.num_heads) for i in order]


@singledispatch
def mask_heads(target, heads: Iterable[HeadId]):
    """Mask heads of a model or a trace.

    On a model, masked heads output zeros before ``W_O``. On a trace, masked
    heads are ignored by token-selection policies.
    """
    raise TypeError(f"Cannot mask heads of {type(target).__name__}")


@mask_heads.register
def _(target: GQAModel, heads: Iterable[HeadId]) -> GQAModel:
    return target.with_head_mask(list(heads))


@mask_heads.register
def _(target: AttentionTrace, heads: Iterable[HeadId]) -> AttentionTrace:
    extra = frozenset((int(l), int(h)) for l, h in heads)
    for layer, head in extra:
        if not (0 <= layer < target.num_layers and 0 <= head < target.num_heads):
            raise HeadScoreError(f"Head ({layer}, {head}) does not exist in the trace")
    return AttentionTrace(
        prefill=target.prefill,
        decode=target.decode,
        decode_positions=target.decode_positions,
        masked=target.masked | extra,
    )


def _score_task(model: GQAModel, task: "NeedleTask", fingerprint: str) -> HeadScoreTable:
    run = teacher_forced_decode(model, task.prompt_embeddings, task.answer_embeddings)
    return score_heads(run.trace, task.generated_ids, task.span, fingerprint)


def calibrate_heads(
    model: GQAModel, tasks: Sequence["NeedleTask"], workers: int | None = None
) -> HeadScoreTable:
    """Score heads over calibration tasks and sum the per-task tables.

    Tasks run in a thread pool; tables are merged in task order.

    Raises:
        HeadScoreError: If ``tasks`` is empty
    """
    if not tasks:
        raise HeadScoreError("Head calibration needs at least one task")
    workers = workers or get_settings().workers
    fingerprint = model.fingerprint()
    logger.info(f"Calibrating heads on {len(tasks)} tasks with {workers} workers")

    with ThreadPoolExecutor(max_workers=workers) as pool:
        tables = list(pool.map(lambda task: _score_task(model, task, fingerprint), tasks))

    merged = HeadScoreTable.zeros(model.config.num_layers, model.config.num_q_heads)
    merged.model_fingerprint = fingerprint
    for table in tables:
        merged = merged.merge(table)
    logger.info(f"Head calibration done: {merged.prompt_count} prompts")
    return merged

