"""Dense-tensor substrate shared by all modules.

Tensors are plain numpy arrays in row-major (C) order with fixed dtypes:
float32 for real values, int8 for quantized activation codes, int32 for
integer MAC accumulators. This module provides the constructors, the
shape/range validation, and the two reductions everything else builds on.

All functions are pure; inputs are never mutated.
"""
from __future__ import annotations

import numpy as np

from .errors import AccumOverflowRiskError, EmptyTensorError, ShapeMismatchError

Shape = tuple[int, ...]

# Longest reduction an int32 accumulator may see: 127*127*65536 < 2^31.
MAX_REDUCTION_LEN = 1 << 16


def validate_shape(dims) -> Shape:
    """Normalize to a tuple of positive ints; reject empty axes."""
    shape = tuple(int(d) for d in dims)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise EmptyTensorError(f"invalid shape {shape}")
    return shape


def element_count(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def as_f32(data, shape: Shape | None = None) -> np.ndarray:
    """Row-major float32 view/copy of ``data``, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def as_i8(data, shape: Shape | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.int8)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def zeros_i32(shape: Shape, reduction_len: int) -> np.ndarray:
    """Accumulator buffer; rejects reductions long enough to overflow."""
    if reduction_len > MAX_REDUCTION_LEN:
        raise AccumOverflowRiskError(
            f"reduction length {reduction_len} exceeds cap {MAX_REDUCTION_LEN}"
        )
    return np.zeros(validate_shape(shape), dtype=np.int32)


def require_same_shape(a: np.ndarray, b: np.ndarray, what: str = "tensors") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {a.shape} vs {b.shape}")


def reduce_abs_mean(t: np.ndarray) -> float:
    """Mean absolute value, accumulated sequentially in float32.

    Sequential left-to-right summation (via cumsum) keeps the result
    reproducible run-to-run on one platform regardless of numpy's
    internal pairwise blocking.
    """
    if t.size == 0:
        raise EmptyTensorError("reduce_abs_mean of empty tensor")
    total = np.cumsum(np.abs(t.ravel(), dtype=np.float32), dtype=np.float32)[-1]
    return float(total) / t.size


def reduce_abs_max(t: np.ndarray, axis) -> np.ndarray:
    """Max |x| over the given axis/axes (per-token absmax is axis=-1)."""
    if t.size == 0:
        raise EmptyTensorError("reduce_abs_max of empty tensor")
    return np.max(np.abs(t), axis=axis).astype(np.float32)
