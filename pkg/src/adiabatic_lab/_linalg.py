"""Small dense helpers used everywhere."""
from __future__ import annotations

import numpy as np


def as_matrix(a, dim: int | None = None) -> np.ndarray:
    """Validate and convert to a finite square complex128 matrix."""
    m = np.asarray(a, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if dim is not None and m.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {m.shape[0]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def norm2(a) -> np.ndarray | float:
    """Spectral norm; batched over leading axes."""
    a = np.asarray(a)
    if a.ndim == 2:
        return float(np.linalg.norm(a, 2))
    return np.linalg.norm(a, 2, axis=(-2, -1))


def comm(a, b):
    return a @ b - b @ a


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


def eye_like(a) -> np.ndarray:
    return np.broadcast_to(np.eye(a.shape[-1], dtype=np.complex128), a.shape).copy()
