"""Backend selection for the step kernels.

The compiled extension is used when it imports; setting
``ADIABATIC_LAB_PURE=1`` forces the numpy/scipy fallback.  Large matrices go
to the fallback regardless, since LAPACK-backed expm beats the naive loops
there.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("ADIABATIC_LAB_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"

# beyond this dimension the O(d^3) loops lose to BLAS
_COMPILED_MAX_DIM = 6


def _pick(d: int):
    if _compiled is not None and d <= _COMPILED_MAX_DIM:
        return _compiled
    return _kernels_py


def expm_batch(omegas):
    omegas = np.asarray(omegas, dtype=np.complex128)
    return _pick(omegas.shape[-1]).expm_batch(omegas)


def chain_product(steps, marks, start):
    start = np.asarray(start, dtype=np.complex128)
    return _pick(start.shape[-1]).chain_product(steps, np.asarray(marks, dtype=np.intp), start)


def expm_chain(omegas, marks, start):
    start = np.asarray(start, dtype=np.complex128)
    return _pick(start.shape[-1]).expm_chain(omegas, np.asarray(marks, dtype=np.intp), start)
