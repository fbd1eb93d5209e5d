"""Toy grouped-query-attention stack with explicit prefill and decode.

The stack is attention only: no MLP, no normalization, no residual stream.
Layer ``l + 1`` consumes the attention-block output of layer ``l``. Scores use
the usual ``1/sqrt(head_dim)`` scaling and there is no positional encoding
beyond the causal mask.

Head ``h`` belongs to KV group ``h // (num_q_heads // num_kv_heads)``; all heads
of a group attend over the same key/value rows.
"""

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .cache import CacheView, KVCache
from .errors import ConfigError, ShapeError
from .logging_config import get_logger
from .numerics import (
    Matrix,
    Vector,
    as_matrix,
    derive_seed,
    matmul,
    seeded_random_matrix,
    softmax_rows,
)
from .serialization import load_tensors, save_tensors

logger = get_logger(__name__)

HeadId = Tuple[int, int]
"""(layer, query head) pair."""

_WEIGHT_NAMES = ("w_q", "w_k", "w_v", "w_o")


class ModelConfig(BaseModel):
    """Geometry and seed of a toy GQA model."""

    num_layers: int = Field(..., ge=1)
    num_q_heads: int = Field(..., ge=1)
    num_kv_heads: int = Field(..., ge=1)
    head_dim: int = Field(..., ge=1)
    hidden_dim: int | None = Field(default=None, ge=1, description="num_q_heads * head_dim")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_geometry(self) -> "ModelConfig":
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ValueError(
                f"num_q_heads={self.num_q_heads} is not divisible by "
                f"num_kv_heads={self.num_kv_heads}"
            )
        expected = self.num_q_heads * self.head_dim
        if self.hidden_dim is None:
            self.hidden_dim = expected
        elif self.hidden_dim != expected:
            raise ValueError(f"hidden_dim must equal num_q_heads * head_dim = {expected}")
        return self

    @property
    def group_size(self) -> int:
        """Query heads per KV group."""
        return self.num_q_heads // self.num_kv_heads

    def group_of(self, head: int) -> int:
        return head // self.group_size

    @classmethod
    def from_json_file(cls, path: Path | str) -> "ModelConfig":
        """Load a config document using the field names above.

        Raises:
            ConfigError: If the document cannot be read or validated
        """
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ConfigError(f"Invalid model config {path}: {e}") from e


@dataclass(frozen=True)
class LayerWeights:
    """Projection matrices of one layer.

    Shapes: ``w_q`` (D, Hq*d), ``w_k``/``w_v`` (D, Hkv*d), ``w_o`` (Hq*d, D).
    """

    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix

    def __post_init__(self) -> None:
        for name in _WEIGHT_NAMES:
            getattr(self, name).setflags(write=False)


@dataclass(frozen=True)
class GQAModel:
    """Immutable model: config, per-layer weights and a head mask.

    ``roles`` is only set for planted models and labels every (layer, head)
    with its intended behavior.
    """

    config: ModelConfig
    layers: Tuple[LayerWeights, ...]
    head_mask: FrozenSet[HeadId] = field(default_factory=frozenset)
    roles: Tuple[Tuple[str, ...], ...] | None = None

    def __post_init__(self) -> None:
        cfg = self.config
        if len(self.layers) != cfg.num_layers:
            raise ShapeError(f"Expected {cfg.num_layers} layers, got {len(self.layers)}")
        q_width = cfg.num_q_heads * cfg.head_dim
        kv_width = cfg.num_kv_heads * cfg.head_dim
        shapes = {
            "w_q": (cfg.hidden_dim, q_width),
            "w_k": (cfg.hidden_dim, kv_width),
            "w_v": (cfg.hidden_dim, kv_width),
            "w_o": (q_width, cfg.hidden_dim),
        }
        for index, lw in enumerate(self.layers):
            for name, shape in shapes.items():
                actual = getattr(lw, name).shape
                if actual != shape:
                    raise ShapeError(f"Layer {index} {name} has shape {actual}, expected {shape}")

    @classmethod
    def seeded(cls, config: ModelConfig) -> "GQAModel":
        """Build a model with weights drawn from ``seeded_random_matrix``.

        Every matrix gets its own seed derived from (config.seed, layer,
        weight index) and entries of standard deviation ``1/sqrt(hidden_dim)``.
        """
        scale = 1.0 / math.sqrt(config.hidden_dim)
        q_width = config.num_q_heads * config.head_dim
        kv_width = config.num_kv_heads * config.head_dim
        shapes = [
            (config.hidden_dim, q_width),
            (config.hidden_dim, kv_width),
            (config.hidden_dim, kv_width),
            (q_width, config.hidden_dim),
        ]
        layers = []
        for layer in range(config.num_layers):
            mats = [
                seeded_random_matrix(rows, cols, derive_seed(config.seed, layer, i), scale)
                for i, (rows, cols) in enumerate(shapes)
            ]
            layers.append(LayerWeights(*mats))
        logger.debug(
            f"Seeded model: {config.num_layers} layers, {config.num_q_heads} q heads, "
            f"{config.num_kv_heads} kv heads, seed={config.seed}"
        )
        return cls(config=config, layers=tuple(layers))

    def with_head_mask(self, heads: Sequence[HeadId]) -> "GQAModel":
        """Copy of this model with additional heads masked."""
        for layer, head in heads:
            if not (0 <= layer < self.config.num_layers and 0 <= head < self.config.num_q_heads):
                raise ShapeError(f"Head ({layer}, {head}) does not exist")
        mask = self.head_mask | frozenset((int(l), int(h)) for l, h in heads)
        return GQAModel(self.config, self.layers, mask, self.roles)

    def fingerprint(self) -> str:
        """Short hash over config and weights, stored with derived artifacts."""
        digest = hashlib.sha256(self.config.model_dump_json().encode("utf-8"))
        for lw in self.layers:
            for name in _WEIGHT_NAMES:
                digest.update(np.ascontiguousarray(getattr(lw, name), dtype="<f8").tobytes())
        return digest.hexdigest()[:16]

    def save(self, stem: Path | str) -> Path:
        """Write weights as a tensor bundle; config and roles go in the sidecar."""
        tensors: Dict[str, np.ndarray] = {}
        for layer, lw in enumerate(self.layers):
            for name in _WEIGHT_NAMES:
                tensors[f"layer{layer}.{name}"] = getattr(lw, name)
        metadata = {
            "kind": "gqa_model",
            "config": self.config.model_dump(),
            "roles": [list(r) for r in self.roles] if self.roles is not None else None,
            "fingerprint": self.fingerprint(),
        }
        return save_tensors(stem, tensors, metadata)

    @classmethod
    def load(cls, stem: Path | str) -> "GQAModel":
        """Read a model written by ``save``."""
        tensors, meta = load_tensors(stem)
        config = ModelConfig.model_validate(meta["config"])
        layers = tuple(
            LayerWeights(*(tensors[f"layer{layer}.{name}"] for name in _WEIGHT_NAMES))
            for layer in range(config.num_layers)
        )
        roles = meta.get("roles")
        return cls(config, layers, roles=tuple(tuple(r) for r in roles) if roles else None)


@dataclass
class AttentionTrace:
    """Softmaxed attention weights of every query head.

    Attributes:
        prefill: Per layer, array (num_q_heads, L, L), causal
        decode: Per decode step, per layer, array (num_q_heads, width) where
            width is the layer's cache length at that step
        decode_positions: Original positions of the columns of ``decode``
        masked: Heads ignored by token-selection policies
    """

    prefill: List[np.ndarray]
    decode: List[List[np.ndarray]] = field(default_factory=list)
    decode_positions: List[List[np.ndarray]] = field(default_factory=list)
    masked: FrozenSet[HeadId] = field(default_factory=frozenset)

    @property
    def num_layers(self) -> int:
        return len(self.prefill)

    @property
    def num_heads(self) -> int:
        return int(self.prefill[0].shape[0])

    @property
    def prompt_len(self) -> int:
        return int(self.prefill[0].shape[1])

    @property
    def num_steps(self) -> int:
        return len(self.decode)

    def add_decode_step(self, rows: Sequence[np.ndarray], positions: Sequence[np.ndarray]) -> None:
        if len(rows) != self.num_layers or len(positions) != self.num_layers:
            raise ShapeError(f"Decode step must cover {self.num_layers} layers")
        self.decode.append([np.asarray(r, dtype=np.float64) for r in rows])
        self.decode_positions.append([np.asarray(p, dtype=np.int64) for p in positions])

    def active_heads(self, layer: int) -> List[int]:
        """Heads of ``layer`` not excluded by the mask."""
        return [h for h in range(self.num_heads) if (layer, h) not in self.masked]

    def save(self, stem: Path | str) -> Path:
        tensors: Dict[str, np.ndarray] = {}
        for layer, weights in enumerate(self.prefill):
            tensors[f"prefill.layer{layer}"] = weights
        for step, (rows, positions) in enumerate(zip(self.decode, self.decode_positions)):
            for layer in range(self.num_layers):
                tensors[f"decode{step}.layer{layer}"] = rows[layer]
                tensors[f"decode{step}.layer{layer}.positions"] = positions[layer].astype(
                    np.float64
                )
        metadata = {
            "kind": "attention_trace",
            "num_layers": self.num_layers,
            "num_steps": self.num_steps,
            "masked": sorted([list(h) for h in self.masked]),
        }
        return save_tensors(stem, tensors, metadata)

    @classmethod
    def load(cls, stem: Path | str) -> "AttentionTrace":
        tensors, meta = load_tensors(stem)
        layers = int(meta["num_layers"])
        trace = cls(
            prefill=[tensors[f"prefill.layer{l}"] for l in range(layers)],
            masked=frozenset((int(l), int(h)) for l, h in meta.get("masked", [])),
        )
        for step in range(int(meta["num_steps"])):
            trace.add_decode_step(
                [tensors[f"decode{step}.layer{l}"] for l in range(layers)],
                [tensors[f"decode{step}.layer{l}.positions"] for l in range(layers)],
            )
        return trace


@dataclass
class DecodeResult:
    """Output of one decode step.

    ``layer_inputs[l]`` is the row fed into layer ``l``; the allocator replays
    attention blocks from it.
    """

    output: Vector
    cache: KVCache
    rows: List[np.ndarray]
    positions: List[np.ndarray]
    layer_inputs: List[Vector]


def _split_heads(x: Matrix, heads: int, head_dim: int) -> np.ndarray:
    """(n, heads*head_dim) -> (heads, n, head_dim)."""
    return x.reshape(x.shape[0], heads, head_dim).transpose(1, 0, 2)


def _attend(
    model: GQAModel,
    layer: int,
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    causal: bool,
) -> Tuple[Matrix, np.ndarray]:
    """Grouped attention for one layer.

    Args:
        queries: (num_q_heads, n, head_dim)
        keys: (num_kv_heads, m, head_dim)
        values: (num_kv_heads, m, head_dim)
        causal: Apply the prefill causal mask

    Returns:
        Tuple of (block output (n, hidden_dim), weights (num_q_heads, n, m))
    """
    cfg = model.config
    n = queries.shape[1]
    scale = 1.0 / math.sqrt(cfg.head_dim)
    heads_out = np.zeros((n, cfg.num_q_heads * cfg.head_dim))
    weights = np.zeros((cfg.num_q_heads, n, keys.shape[1]))

    for head in range(cfg.num_q_heads):
        group = cfg.group_of(head)
        scores = matmul(queries[head], keys[group].T) * scale
        probs = softmax_rows(scores, causal_mask_from=1 if causal else None)
        weights[head] = probs
        if (layer, head) in model.head_mask:
            continue
        cols = slice(head * cfg.head_dim, (head + 1) * cfg.head_dim)
        heads_out[:, cols] = matmul(probs, values[group])

    return matmul(heads_out, model.layers[layer].w_o), weights


def _check_width(model: GQAModel, x: Matrix, what: str) -> None:
    if x.shape[1] != model.config.hidden_dim:
        raise ShapeError(
            f"{what} has {x.shape[1]} columns, model hidden_dim is {model.config.hidden_dim}"
        )


def prefill(model: GQAModel, prompt_embeddings: Matrix) -> Tuple[Matrix, KVCache, AttentionTrace]:
    """Run causal attention over a whole prompt.

    Args:
        model: Model to run
        prompt_embeddings: (L, hidden_dim) prompt rows

    Returns:
        Tuple of (last layer output (L, hidden_dim), filled cache, trace)

    Raises:
        ShapeError: If the embeddings do not have hidden_dim columns or no rows
    """
    x = as_matrix(prompt_embeddings)
    _check_width(model, x, "prompt_embeddings")
    if x.shape[0] < 1:
        raise ShapeError("prompt_embeddings must have at least one row")

    cfg = model.config
    keys, values, traces = [], [], []
    for layer, lw in enumerate(model.layers):
        q = _split_heads(matmul(x, lw.w_q), cfg.num_q_heads, cfg.head_dim)
        k = _split_heads(matmul(x, lw.w_k), cfg.num_kv_heads, cfg.head_dim)
        v = _split_heads(matmul(x, lw.w_v), cfg.num_kv_heads, cfg.head_dim)
        x, weights = _attend(model, layer, q, k, v, causal=True)
        keys.append(k)
        values.append(v)
        traces.append(weights)

    logger.debug(f"Prefilled {len(keys[0][0])} tokens through {cfg.num_layers} layers")
    return x, KVCache.from_prefill(keys, values), AttentionTrace(prefill=traces)


def decode_step(model: GQAModel, cache: KVCache, token_embedding: Vector) -> DecodeResult:
    """Append one token to the cache and attend over it.

    The token's key/value rows are appended before attention, so each layer's
    attention row ends with the token itself.

    Raises:
        ShapeError: If the embedding width or cache geometry does not match
    """
    cfg = model.config
    if cache.num_layers != cfg.num_layers or cache.num_kv_heads != cfg.num_kv_heads:
        raise ShapeError(
            f"Cache has {cache.num_layers} layers / {cache.num_kv_heads} kv heads, "
            f"model has {cfg.num_layers} / {cfg.num_kv_heads}"
        )
    x = np.asarray(token_embedding, dtype=np.float64).reshape(1, -1)
    _check_width(model, x, "token_embedding")

    cache.begin_decode()
    rows, positions, inputs = [], [], []
    for layer, lw in enumerate(model.layers):
        inputs.append(x[0].copy())
        cache.append(layer, matmul(x, lw.w_k)[0], matmul(x, lw.w_v)[0])
        view = cache.view(layer)
        q = _split_heads(matmul(x, lw.w_q), cfg.num_q_heads, cfg.head_dim)
        x, weights = _attend(model, layer, q, view.keys, view.values, causal=False)
        rows.append(weights[:, 0, :])
        positions.append(view.positions.copy())

    return DecodeResult(output=x[0], cache=cache, rows=rows, positions=positions, layer_inputs=inputs)


def attention_block_output(
    model: GQAModel, layer: int, query_row: Vector, cache_view: CacheView
) -> Vector:
    """Attention-block output of one layer for a single query against a view.

    ``query_row`` is the layer's input row (hidden_dim entries); the view must
    already contain the query token's own key/value row if it should be
    attended. Uses the same code path as ``decode_step``.

    Raises:
        ShapeError: If the view is empty or the row has the wrong width
    """
    if len(cache_view) == 0:
        raise ShapeError("Cannot attend over an empty cache view")
    cfg = model.config
    x = np.asarray(query_row, dtype=np.float64).reshape(1, -1)
    _check_width(model, x, "query_row")
    q = _split_heads(matmul(x, model.layers[layer].w_q), cfg.num_q_heads, cfg.head_dim)
    out, _ = _attend(model, layer, q, cache_view.keys, cache_view.values, causal=False)
    return out[0]



@dataclass
class Generation:
    """Result of a prefill followed by teacher-forced decode steps."""

    prefill_hidden: Matrix
    outputs: Matrix
    cache: KVCache
    trace: AttentionTrace
    layer_inputs: List[List[Vector]]


def teacher_forced_decode(
    model: GQAModel,
    prompt_embeddings: Matrix,
    step_embeddings: Matrix,
    compress: Callable[[KVCache, AttentionTrace], None] | None = None,
) -> Generation:
    """Prefill, optionally compress the cache, then feed fixed decode inputs.

    Args:
        model: Model to run
        prompt_embeddings: (L, hidden_dim) prompt
        step_embeddings: (T, hidden_dim) inputs of the decode steps
        compress: Called once with the prefilled cache and trace; evicts in place

    Returns:
        Generation: Outputs (T, hidden_dim), final cache and full trace
    """
    hidden, cache, trace = prefill(model, prompt_embeddings)
    if compress is not None:
        compress(cache, trace)

    steps = as_matrix(step_embeddings)
    outputs = np.zeros((steps.shape[0], model.config.hidden_dim))
    layer_inputs: List[List[Vector]] = []
    for t, row in enumerate(steps):
        result = decode_step(model, cache, row)
        trace.add_decode_step(result.rows, result.positions)
        outputs[t] = result.output
        layer_inputs.append(result.layer_inputs)
    return Generation(hidden, outputs, cache, trace, layer_inputs)
