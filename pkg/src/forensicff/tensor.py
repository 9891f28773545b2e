"""Dense tensor conventions and the numeric primitives used everywhere else.

Tensors are plain numpy float32 arrays in row-major N,C,H,W layout.
Reductions accumulate in float64 before rounding back, which keeps the
conservation checks elsewhere in the suite tight.
"""

from __future__ import annotations

import numpy as np

from .errors import ForensicError

DTYPE = np.float32


def as_tensor(values, shape=None) -> np.ndarray:
    """Build a float32 tensor, optionally reshaped, validating finiteness."""
    t = np.asarray(values, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(shape)
    if not np.all(np.isfinite(t)):
        raise ForensicError("non-finite tensor values")
    return t


def reduce_max_spatial(t: np.ndarray) -> tuple[list[float], list[tuple[int, int]]]:
    """Per-channel spatial max of a [C,H,W] tensor.

    Returns (values, argmax positions); ties break to the first position in
    row-major scan order.
    """
    if t.ndim != 3:
        raise ForensicError("expected a C,H,W tensor")
    c, h, w = t.shape
    if h < 1 or w < 1:
        raise ForensicError("empty tensor")
    flat = t.reshape(c, h * w)
    idx = np.argmax(flat, axis=1)
    values = [float(flat[i, idx[i]]) for i in range(c)]
    argmax = [(int(i // w), int(i % w)) for i in idx]
    return values, argmax


def sum_abs(t: np.ndarray) -> float:
    """Sum of absolute values over all entries, accumulated in float64."""
    return float(np.sum(np.abs(t), dtype=np.float64))


def relu_clip(t: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x); shape preserved, idempotent."""
    return np.maximum(t, DTYPE(0))
