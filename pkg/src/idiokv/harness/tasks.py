"""Synthetic needle-in-a-haystack recall tasks.

Prompts are embedding matrices, not text. The first channels of every
embedding are markers read by planted models; the rest carry random content:

==========  =====================================================
channel     meaning
==========  =====================================================
0 SINK      the first ``sink`` prompt tokens
1 TAIL      the last ``window`` prompt tokens and every answer step
2 CONTEXT   needle tokens (value ``NEEDLE_STRENGTH``) and decoys
3 PEAK      the middle token of the needle
4 CUE       the question: last ``window`` prompt tokens and answer steps
5..         content noise
==========  =====================================================

The needle start is uniform over ``[sink, prompt_len - window - span_len]``
so the span never touches the sink or the observation window. Answer steps
are teacher forced: step ``t`` emits the ``t``-th needle token id, steps past
the end of the needle emit ``END_TOKEN``.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from ..config import TaskSection, get_settings
from ..errors import ConfigError
from ..heads import AnswerSpan
from ..logging_config import get_logger
from ..numerics import Matrix, derive_seed
from ..serialization import load_tensors, save_tensors

logger = get_logger(__name__)

SINK, TAIL, CONTEXT, PEAK, CUE = range(5)
MARKER_CHANNELS = 5
NEEDLE_STRENGTH = 3.0
DECOY_STRENGTH = 1.5
END_TOKEN = 0

FAMILY_NOISE = {"single_needle": 0.1, "decoy_needles": 0.1, "noisy_haystack": 0.5}
FAMILY_DECOYS = {"single_needle": 0, "decoy_needles": 2, "noisy_haystack": 0}
FAMILIES = tuple(FAMILY_NOISE)


class TaskParams(BaseModel):
    """Shape of one needle task."""

    prompt_len: int = Field(..., ge=2)
    span_len: int = Field(default=6, ge=1)
    answer_steps: int = Field(default=8, ge=1)
    hidden_dim: int = Field(..., ge=MARKER_CHANNELS + 1)
    sink: int = Field(default_factory=lambda: get_settings().sink, ge=0)
    window: int = Field(default_factory=lambda: get_settings().window, ge=1)
    family: str = Field(default="single_needle")

    def check_feasible(self) -> None:
        if self.family not in FAMILY_NOISE:
            raise ConfigError(f"Unknown task family {self.family!r}; expected one of {FAMILIES}")
        floor = self.sink + self.window + self.span_len + 1
        if self.prompt_len < floor:
            raise ConfigError(
                f"prompt_len={self.prompt_len} is below sink + window + span + 1 = {floor}"
            )


@dataclass
class NeedleTask:
    """One recall task.

    Attributes:
        prompt_embeddings: (prompt_len, hidden_dim)
        answer_embeddings: (answer_steps, hidden_dim) teacher-forced decode inputs
        span: Needle positions and the ids counted as correct
        generated_ids: Emitted id per answer step
        family: Task family, used as the dataset for error averaging
        seed: Seed the task was drawn from
        decoy_starts: Start positions of weaker decoy spans
        noise: Standard deviation of the content channels
    """

    prompt_embeddings: Matrix
    answer_embeddings: Matrix
    span: AnswerSpan
    generated_ids: Tuple[int, ...]
    family: str
    seed: int
    decoy_starts: Tuple[int, ...] = field(default_factory=tuple)
    noise: float = 0.1

    @property
    def prompt_len(self) -> int:
        return int(self.prompt_embeddings.shape[0])

    @property
    def needle_start(self) -> int:
        return self.span.positions[0]


def _answer_rows(rng: np.random.Generator, steps: int, hidden_dim: int, noise: float) -> Matrix:
    rows = np.zeros((steps, hidden_dim))
    rows[:, TAIL] = 1.0
    rows[:, CUE] = 1.0
    rows[:, MARKER_CHANNELS:] = rng.normal(0.0, noise, (steps, hidden_dim - MARKER_CHANNELS))
    return rows


def _decoy_starts(
    rng: np.random.Generator, count: int, params: TaskParams, needle: int
) -> List[int]:
    lo, hi = params.sink, params.prompt_len - params.window - params.span_len
    taken = [(needle, needle + params.span_len)]
    starts: List[int] = []
    for _ in range(count):
        options = [
            s
            for s in range(lo, hi + 1)
            if all(s + params.span_len <= a or s >= b for a, b in taken)
        ]
        if not options:
            break
        s = int(options[rng.integers(len(options))])
        starts.append(s)
        taken.append((s, s + params.span_len))
    return sorted(starts)


def generate_needle_task(params: TaskParams, seed: int) -> NeedleTask:
    """Draw a task; identical ``(params, seed)`` give identical tasks.

    Raises:
        ConfigError: If the prompt is too short for sink, window and span
    """
    params.check_feasible()
    rng = np.random.default_rng(seed)
    L, D, s = params.prompt_len, params.hidden_dim, params.span_len
    noise = FAMILY_NOISE[params.family]

    start = int(rng.integers(params.sink, L - params.window - s + 1))
    span_ids = 1000 + rng.permutation(1000)[:s]

    x = np.zeros((L, D))
    x[:, MARKER_CHANNELS:] = rng.normal(0.0, noise, (L, D - MARKER_CHANNELS))
    x[: params.sink, SINK] = 1.0
    x[L - params.window :, TAIL] = 1.0
    x[L - params.window :, CUE] = 1.0
    x[start : start + s, CONTEXT] = NEEDLE_STRENGTH
    x[start + s // 2, PEAK] = 1.0

    decoys = _decoy_starts(rng, FAMILY_DECOYS[params.family], params, start)
    for d in decoys:
        x[d : d + s, CONTEXT] = DECOY_STRENGTH

    answers = _answer_rows(rng, params.answer_steps, D, noise)
    generated = tuple(
        int(span_ids[t]) if t < s else END_TOKEN for t in range(params.answer_steps)
    )
    span = AnswerSpan(tuple(range(start, start + s)), frozenset(int(i) for i in span_ids))
    return NeedleTask(x, answers, span, generated, params.family, seed, tuple(decoys), noise)


def generate_tasks(
    section: TaskSection, hidden_dim: int, seed: int, sink: int | None = None, window: int | None = None
) -> List[NeedleTask]:
    """``section.count`` tasks per family, seeded from ``(seed, family, index)``."""
    settings = get_settings()
    tasks = []
    for family_index, family in enumerate(section.families):
        params = TaskParams(
            prompt_len=section.prompt_len,
            span_len=section.span_len,
            answer_steps=section.answer_steps,
            hidden_dim=hidden_dim,
            sink=settings.sink if sink is None else sink,
            window=settings.window if window is None else window,
            family=family,
        )
        for i in range(section.count):
            tasks.append(generate_needle_task(params, derive_seed(seed, family_index, i)))
    logger.info(f"Generated {len(tasks)} tasks across families {list(section.families)}")
    return tasks


def save_tasks(stem: Path | str, tasks: Sequence[NeedleTask]) -> Path:
    """Write a task bundle: embeddings as tensors, everything else in the sidecar."""
    tensors = {}
    records = []
    for i, task in enumerate(tasks):
        tensors[f"task{i}.prompt"] = task.prompt_embeddings
        tensors[f"task{i}.answer"] = task.answer_embeddings
        records.append(
            {
                "family": task.family,
                "seed": task.seed,
                "span": list(task.span.positions),
                "answer_token_ids": sorted(task.span.answer_token_ids),
                "generated_ids": list(task.generated_ids),
                "decoy_starts": list(task.decoy_starts),
                "noise": task.noise,
            }
        )
    return save_tensors(stem, tensors, {"kind": "needle_tasks", "tasks": records})


def load_tasks(stem: Path | str) -> List[NeedleTask]:
    tensors, meta = load_tensors(stem)
    tasks = []
    for i, rec in enumerate(meta["tasks"]):
        tasks.append(
            NeedleTask(
                prompt_embeddings=tensors[f"task{i}.prompt"],
                answer_embeddings=tensors[f"task{i}.answer"],
                span=AnswerSpan(tuple(rec["span"]), frozenset(rec["answer_token_ids"])),
                generated_ids=tuple(rec["generated_ids"]),
                family=rec["family"],
                seed=rec["seed"],
                decoy_starts=tuple(rec["decoy_starts"]),
                noise=rec["noise"],
            )
        )
    return tasks
