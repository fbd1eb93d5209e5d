"""Per-layer, per-KV-head key/value storage.

Rows are tracked by their original position: prompt tokens occupy
``[0, prompt_len)`` and decode-time appends continue from there. Eviction
removes prompt rows physically and is layer-unified: every KV head of a layer
keeps the same positions. Rows appended after ``begin_decode`` are never
evicted.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .errors import EvictionError, ShapeError
from .logging_config import get_logger
from .serialization import load_tensors, save_tensors

logger = get_logger(__name__)


class CachePhase(str, Enum):
    """Whether appends still extend the prompt."""

    PREFILL = "prefill"
    DECODE = "decode"


class EvictionDecision(BaseModel):
    """Positions of one layer whose KV pairs survive compression."""

    layer: int = Field(..., ge=0)
    keep_indices: List[int]
    prompt_len: int = Field(..., ge=1)
    window: int = Field(default=0, ge=0, description="Trailing prompt positions that must be kept")
    kv_head: int | None = Field(
        default=None, ge=0, description="Set only by per-group policies; None means layer-unified"
    )

    @model_validator(mode="after")
    def check_indices(self) -> "EvictionDecision":
        keep = self.keep_indices
        if any(b <= a for a, b in zip(keep, keep[1:])):
            raise ValueError("keep_indices must be strictly increasing")
        if keep and (keep[0] < 0 or keep[-1] >= self.prompt_len):
            raise ValueError(f"keep_indices must lie in [0, {self.prompt_len})")
        tail = range(max(0, self.prompt_len - self.window), self.prompt_len)
        kept = set(keep)
        missing = [p for p in tail if p not in kept]
        if missing:
            raise ValueError(f"observation window positions {missing} were dropped")
        return self


class MemoryReport(BaseModel):
    """Retained row counts per layer."""

    per_layer: List[int]
    total: int


@dataclass
class CacheView:
    """Keys and values of one layer, shaped (kv_heads, rows, head_dim)."""

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return int(self.positions.size)

    def select(self, positions: Sequence[int]) -> "CacheView":
        """Restrict the view to the given original positions.

        Raises:
            EvictionError: If a requested position is not present
        """
        wanted = np.asarray(positions, dtype=np.int64)
        rows = np.searchsorted(self.positions, wanted)
        valid = (rows < self.positions.size) & (
            self.positions[np.minimum(rows, self.positions.size - 1)] == wanted
        )
        if not np.all(valid):
            raise EvictionError(f"Positions {wanted[~valid].tolist()} are not in the view")
        return CacheView(self.keys[:, rows, :], self.values[:, rows, :], wanted)


class KVCache:
    """Key/value storage for one sequence.

    A cache is owned by a single writer; concurrent readers are fine between
    mutations.
    """

    def __init__(self, num_layers: int, num_kv_heads: int, head_dim: int):
        self.num_layers = num_layers
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.phase = CachePhase.PREFILL
        empty = (num_kv_heads, 0, head_dim)
        self._keys: List[np.ndarray] = [np.zeros(empty) for _ in range(num_layers)]
        self._values: List[np.ndarray] = [np.zeros(empty) for _ in range(num_layers)]
        self._positions: List[np.ndarray] = [
            np.zeros(0, dtype=np.int64) for _ in range(num_layers)
        ]
        self._appended = [0] * num_layers
        self._prompt_len = [0] * num_layers

    @classmethod
    def from_prefill(cls, keys: Sequence[np.ndarray], values: Sequence[np.ndarray]) -> "KVCache":
        """Build a cache holding a whole prompt.

        Args:
            keys: Per layer, array of shape (kv_heads, prompt_len, head_dim)
            values: Same shapes as ``keys``
        """
        num_kv_heads, prompt_len, head_dim = keys[0].shape
        cache = cls(len(keys), num_kv_heads, head_dim)
        for layer, (k, v) in enumerate(zip(keys, values)):
            if k.shape != v.shape or k.shape != keys[0].shape:
                raise ShapeError(f"Layer {layer} key/value shapes {k.shape} / {v.shape} disagree")
            cache._keys[layer] = np.array(k, dtype=np.float64)
            cache._values[layer] = np.array(v, dtype=np.float64)
            cache._positions[layer] = np.arange(prompt_len, dtype=np.int64)
            cache._appended[layer] = prompt_len
            cache._prompt_len[layer] = prompt_len
        return cache

    def copy(self) -> "KVCache":
        """Deep copy, for running several policies from one prefill."""
        other = KVCache(self.num_layers, self.num_kv_heads, self.head_dim)
        other.phase = self.phase
        other._keys = [k.copy() for k in self._keys]
        other._values = [v.copy() for v in self._values]
        other._positions = [p.copy() for p in self._positions]
        other._appended = list(self._appended)
        other._prompt_len = list(self._prompt_len)
        return other

    def prompt_len(self, layer: int = 0) -> int:
        """Number of prompt positions the layer has seen."""
        return self._prompt_len[layer]

    def positions(self, layer: int) -> np.ndarray:
        """Original positions of the retained rows, strictly increasing."""
        return self._positions[layer].copy()

    def layer_len(self, layer: int) -> int:
        return int(self._positions[layer].size)

    def view(self, layer: int) -> CacheView:
        """Current keys/values of a layer (no copy)."""
        return CacheView(self._keys[layer], self._values[layer], self._positions[layer])

    def begin_decode(self) -> None:
        """Switch to the decode phase; later appends are protected from eviction."""
        if self.phase is CachePhase.PREFILL:
            logger.debug(f"Cache enters decode phase with prompt_len={self._prompt_len}")
        self.phase = CachePhase.DECODE

    def append(self, layer: int, k_t: np.ndarray, v_t: np.ndarray) -> "KVCache":
        """Append one token's key/value rows to every KV head of a layer.

        Args:
            layer: Layer index
            k_t: Shape (kv_heads, head_dim) or flat (kv_heads * head_dim,)
            v_t: Same shape as ``k_t``

        Returns:
            KVCache: This cache

        Raises:
            ShapeError: If the rows do not match the cache geometry
        """
        shape = (self.num_kv_heads, self.head_dim)
        k = np.asarray(k_t, dtype=np.float64)
        v = np.asarray(v_t, dtype=np.float64)
        if k.size != self.num_kv_heads * self.head_dim or v.size != k.size:
            raise ShapeError(
                f"Expected key/value rows of {shape}, got {k.shape} and {v.shape}"
            )
        k = k.reshape(shape)[:, None, :]
        v = v.reshape(shape)[:, None, :]

        position = self._appended[layer]
        self._keys[layer] = np.concatenate([self._keys[layer], k], axis=1)
        self._values[layer] = np.concatenate([self._values[layer], v], axis=1)
        self._positions[layer] = np.append(self._positions[layer], np.int64(position))
        self._appended[layer] += 1
        if self.phase is CachePhase.PREFILL:
            self._prompt_len[layer] += 1
        return self

    def apply_eviction(self, decision: EvictionDecision) -> "KVCache":
        """Keep exactly the decided prompt rows of one layer.

        Decode-phase rows are always retained.

        Raises:
            EvictionError: For per-group decisions, empty keep sets, positions
                outside the prompt, or positions no longer present
        """
        layer = decision.layer
        if layer >= self.num_layers:
            raise EvictionError(f"Layer {layer} out of range for {self.num_layers} layers")
        if decision.kv_head is not None:
            raise EvictionError("Per-group decisions cannot be applied to layer-unified storage")
        if not decision.keep_indices:
            raise EvictionError(f"Empty keep set for layer {layer}")

        prompt_len = self._prompt_len[layer]
        if decision.prompt_len != prompt_len:
            raise EvictionError(
                f"Decision was made for prompt_len={decision.prompt_len}, cache has {prompt_len}"
            )

        positions = self._positions[layer]
        keep = np.asarray(decision.keep_indices, dtype=np.int64)
        present = positions[positions < prompt_len]
        unknown = keep[~np.isin(keep, present)]
        if unknown.size:
            raise EvictionError(f"Layer {layer} no longer holds positions {unknown.tolist()}")

        rows = np.isin(positions, keep) | (positions >= prompt_len)
        self._keys[layer] = self._keys[layer][:, rows, :]
        self._values[layer] = self._values[layer][:, rows, :]
        self._positions[layer] = positions[rows]
        logger.debug(f"Layer {layer}: kept {int(rows.sum())} of {positions.size} rows")
        return self

    def memory_report(self) -> MemoryReport:
        """Retained rows per layer and in total."""
        per_layer = [int(p.size) for p in self._positions]
        return MemoryReport(per_layer=per_layer, total=sum(per_layer))

    def save(self, stem: Path | str) -> Path:
        """Snapshot the cache as a tensor bundle."""
        tensors = {}
        for layer in range(self.num_layers):
            tensors[f"layer{layer}.keys"] = self._keys[layer]
            tensors[f"layer{layer}.values"] = self._values[layer]
            tensors[f"layer{layer}.positions"] = self._positions[layer].astype(np.float64)
        metadata = {
            "kind": "kv_cache",
            "num_layers": self.num_layers,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "phase": self.phase.value,
            "appended": self._appended,
            "prompt_len": self._prompt_len,
        }
        return save_tensors(stem, tensors, metadata)

    @classmethod
    def load(cls, stem: Path | str) -> "KVCache":
        """Restore a snapshot written by ``save``."""
        tensors, meta = load_tensors(stem)
        cache = cls(meta["num_layers"], meta["num_kv_heads"], meta["head_dim"])
        cache.phase = CachePhase(meta["phase"])
        cache._appended = [int(n) for n in meta["appended"]]
        cache._prompt_len = [int(n) for n in meta["prompt_len"]]
        for layer in range(cache.num_layers):
            cache._keys[layer] = tensors[f"layer{layer}.keys"]
            cache._values[layer] = tensors[f"layer{layer}.values"]
            cache._positions[layer] = tensors[f"layer{layer}.positions"].astype(np.int64)
        return cache
