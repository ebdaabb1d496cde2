"""Orthonormal Hadamard rotations (Sylvester construction).

H_1 = [1], H_2n = [[H, H], [H, -H]], normalized by 1/sqrt(dim) so that
H @ H.T == I.  Only power-of-two dimensions exist under this construction.

Rotation placement:
  * ``pre``:  H @ x  (mixes rows;  needs x.rows == dim)
  * ``post``: x @ H  (mixes cols;  needs x.cols == dim)
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .linalg import Matrix


@dataclass(frozen=True)
class HadamardMatrix:
    dim: int
    matrix: np.ndarray


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=32)
def _signs(dim: int) -> np.ndarray:
    m = np.ones((1, 1), dtype=np.float64)
    while m.shape[0] < dim:
        m = np.block([[m, m], [m, -m]])
    m.setflags(write=False)
    return m


def hadamard_matrix(dim: int) -> HadamardMatrix:
    if not _is_power_of_two(dim):
        raise ValueError(f"Hadamard dimension must be a power of two, got {dim}")
    return HadamardMatrix(dim, _signs(dim) / np.sqrt(dim))


def rotate(x: Matrix, h: HadamardMatrix, placement: str) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {x.shape}")
    if placement == "pre":
        if x.shape[0] != h.dim:
            raise ValueError(f"pre-rotation needs {h.dim} rows, matrix has shape {x.shape}")
        return h.matrix @ x
    if placement == "post":
        if x.shape[1] != h.dim:
            raise ValueError(f"post-rotation needs {h.dim} cols, matrix has shape {x.shape}")
        return x @ h.matrix
    raise ValueError(f"placement must be 'pre' or 'post', got {placement!r}")
