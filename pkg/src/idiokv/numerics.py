"""Deterministic float64 kernels used by every other module.

All kernels accept and return ``numpy`` arrays of dtype float64. Products are
accumulated in a fixed order (see ``matmul``) so results are bit-identical
across BLAS builds, which is what lets golden files be compared exactly.

Random matrices come from numpy's PCG64 bit generator seeded through
``SeedSequence(seed)`` (``numpy.random.default_rng(seed)``). Each entry is
``scale * sqrt(3) * (2u - 1)`` where ``u = (next_uint64 >> 11) * 2**-53`` is
the generator's standard double. The distribution is uniform on
``[-sqrt(3) * scale, sqrt(3) * scale]``: symmetric with standard deviation
``scale``. Entries are drawn in row-major order.
"""

import math
from typing import Sequence

import numpy as np
import numpy.typing as npt

from .errors import ShapeError

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

_SQRT3 = math.sqrt(3.0)


def as_matrix(m: npt.ArrayLike) -> Matrix:
    """Coerce input into a 2-D float64 array.

    Raises:
        ShapeError: If the input is not two-dimensional
    """
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"Expected a 2-D matrix, got shape {arr.shape}")
    return arr


def _check_finite(m: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{what} contains NaN or Inf")


def matmul(a: npt.ArrayLike, b: npt.ArrayLike) -> Matrix:
    """Standard matrix product ``a @ b``.

    The inner dimension is accumulated left to right, one rank-1 update per
    step, so every entry equals the sequential sum
    ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``.

    Args:
        a: Left operand (rows x inner)
        b: Right operand (inner x cols)

    Returns:
        Matrix: Product of shape (a.rows, b.cols)

    Raises:
        ShapeError: If ``a.cols != b.rows``
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")

    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def softmax_rows(m: npt.ArrayLike, causal_mask_from: int | None = None) -> Matrix:
    """Row-wise softmax with optional causal masking.

    When ``causal_mask_from`` is given, row ``i`` masks every column
    ``j >= causal_mask_from + i``. Prefill attention uses ``1`` (each query
    sees itself and earlier keys). Masked entries come out as exactly 0.

    Args:
        m: Finite score matrix
        causal_mask_from: Column where masking starts for row 0

    Returns:
        Matrix: Rows are non-negative and sum to 1

    Raises:
        ValueError: If the input is not finite or a row is fully masked
    """
    m = as_matrix(m)
    _check_finite(m, "softmax input")
    rows, cols = m.shape

    if causal_mask_from is None:
        keep = np.ones((rows, cols), dtype=bool)
    else:
        limits = causal_mask_from + np.arange(rows)
        if rows and limits.min() <= 0:
            raise ValueError(
                f"causal_mask_from={causal_mask_from} masks every column of row 0"
            )
        keep = np.arange(cols)[None, :] < limits[:, None]

    shifted = np.where(keep, m, -np.inf)
    row_max = shifted.max(axis=1, keepdims=True)
    weights = np.where(keep, np.exp(shifted - row_max), 0.0)
    return weights / weights.sum(axis=1, keepdims=True)


def avg_pool_1d(v: Sequence[float] | npt.ArrayLike, kernel: int) -> Vector:
    """Centered average pooling with truncated boundary windows.

    Position ``i`` becomes the mean of ``v[i - kernel//2 : i + kernel//2 + 1]``
    clipped to the sequence, averaged over the entries that exist.

    Args:
        v: Input sequence
        kernel: Odd window width

    Returns:
        Vector: Pooled sequence with the same length as ``v``

    Raises:
        ValueError: If ``kernel`` is even or less than 1
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"Pooling kernel must be odd and >= 1, got {kernel}")

    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if kernel == 1 or arr.size == 0:
        return arr.copy()

    half = kernel // 2
    padded = np.pad(arr, half)
    counts = np.pad(np.ones_like(arr), half)
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    count_windows = np.lib.stride_tricks.sliding_window_view(counts, kernel)
    return windows.sum(axis=1) / count_windows.sum(axis=1)


def frobenius_norm(m: npt.ArrayLike) -> float:
    """Square root of the sum of squared entries.

    Raises:
        ValueError: If the input is not finite
    """
    arr = np.asarray(m, dtype=np.float64)
    _check_finite(arr, "frobenius_norm input")
    return float(np.sqrt(np.sum(arr * arr)))


def seeded_random_matrix(rows: int, cols: int, seed: int, scale: float) -> Matrix:
    """Deterministic matrix with symmetric entries of standard deviation ``scale``.

    See the module docstring for the exact generator.

    Args:
        rows: Row count
        cols: Column count
        seed: Non-negative integer seed
        scale: Target standard deviation

    Returns:
        Matrix: Shape (rows, cols)

    Raises:
        ValueError: If ``scale`` is not positive
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    u = rng.random((rows, cols))
    return (2.0 * u - 1.0) * (_SQRT3 * scale)


def cosine_similarity(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """Cosine of the angle between two flattened arrays (0 if either is zero)."""
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = frobenius_norm(x) * frobenius_norm(y)
    if denom == 0.0:
        return 0.0
    return float(np.dot(x, y) / denom)


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for a tuple of integer keys (via ``SeedSequence``)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
