"""Dense float64 matrix helpers and seeded random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects with ``float64`` dtype.
The helpers here only add the shape/finiteness checks the rest of the
package relies on.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

Matrix = np.ndarray


class ColumnStats(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray
    max_abs: np.ndarray


def as_matrix(data, name: str = "matrix") -> Matrix:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; equal seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def column_stats(m: Matrix) -> ColumnStats:
    """Per-column mean, population variance and max |x|."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError("column_stats needs a non-empty 2-D matrix")
    mean = m.mean(axis=0)
    var = ((m - mean) ** 2).mean(axis=0)
    return ColumnStats(mean, var, np.abs(m).max(axis=0))


def map_elementwise(m: Matrix, f: Callable[[float], float]) -> Matrix:
    m = np.asarray(m, dtype=np.float64)
    out = np.vectorize(f, otypes=[np.float64])(m) if m.size else m.copy()
    if not np.all(np.isfinite(out)):
        raise ValueError("elementwise map produced non-finite values")
    return out
