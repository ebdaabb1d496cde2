"""Shared dense linear-algebra substrate.

Matrices are plain 2-D numpy arrays in C (row-major) order, float64 unless a
caller explicitly works in float32.  numpy's matmul and reductions are
deterministic for a fixed build and thread count, which is what the
bit-reproducibility contract of the CLI relies on.
"""
from __future__ import annotations

import numpy as np

# Alias used in signatures throughout the package: a 2-D float array.
Matrix = np.ndarray


def rng(seed: int) -> np.random.Generator:
    """Seeded generator with a fixed, documented algorithm (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(x, name: str = "matrix") -> Matrix:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}: inner dims differ")
    return a @ b


def softmax_rows(x: Matrix) -> Matrix:
    """Row-wise softmax with the usual max-shift.

    Rows may contain -inf entries (masked positions get weight 0); each row
    must contain at least one finite entry.
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)
