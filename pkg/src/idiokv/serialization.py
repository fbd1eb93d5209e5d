"""Flat-binary tensor files with a JSON sidecar.

A tensor bundle named ``stem`` is stored as two files:

* ``stem.bin`` - every tensor's data as little-endian float64, C order,
  concatenated in the order listed by the sidecar.
* ``stem.json`` - ``{"format": "idiokv-f64le/1", "tensors": [{"name",
  "shape", "offset"}], "metadata": {...}}`` where ``offset`` counts float64
  elements from the start of ``stem.bin``.

Model weights, KV-cache snapshots, task bundles and attention traces all use
this layout.
"""

import json
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from .errors import ArtifactError
from .logging_config import get_logger

logger = get_logger(__name__)

FORMAT_TAG = "idiokv-f64le/1"
_DTYPE = np.dtype("<f8")


def bundle_paths(stem: Path | str) -> Tuple[Path, Path]:
    """Return the (binary, sidecar) paths for a bundle stem."""
    stem = Path(stem)
    # dots inside the stem belong to the name
    return stem.parent / f"{stem.name}.bin", stem.parent / f"{stem.name}.json"


def save_tensors(
    stem: Path | str,
    tensors: Mapping[str, np.ndarray],
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Write a tensor bundle.

    Args:
        stem: Path without suffix
        tensors: Ordered mapping of tensor name to array
        metadata: JSON-serializable metadata stored in the sidecar

    Returns:
        Path: The sidecar path
    """
    bin_path, json_path = bundle_paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype=_DTYPE)
            fh.write(data.tobytes(order="C"))
            entries.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += int(data.size)

    sidecar = {"format": FORMAT_TAG, "tensors": entries, "metadata": dict(metadata or {})}
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug(f"Wrote {len(entries)} tensors ({offset} values) to {bin_path}")
    return json_path


def load_tensors(stem: Path | str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a tensor bundle written by ``save_tensors``.

    Returns:
        Tuple of (name -> float64 array, metadata)

    Raises:
        ArtifactError: If either file is missing or the layout is inconsistent
    """
    bin_path, json_path = bundle_paths(stem)
    try:
        sidecar = json.loads(json_path.read_text(encoding="utf-8"))
        flat = np.fromfile(bin_path, dtype=_DTYPE)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"Cannot read tensor bundle {stem}: {e}") from e

    if sidecar.get("format") != FORMAT_TAG:
        raise ArtifactError(f"{json_path} has unsupported format {sidecar.get('format')!r}")

    tensors: Dict[str, np.ndarray] = {}
    for entry in sidecar.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        start = int(entry["offset"])
        size = int(np.prod(shape, dtype=np.int64))
        if start + size > flat.size:
            raise ArtifactError(f"Tensor {entry['name']} overruns {bin_path}")
        tensors[entry["name"]] = flat[start : start + size].astype(np.float64).reshape(shape)

    return tensors, sidecar.get("metadata", {})
