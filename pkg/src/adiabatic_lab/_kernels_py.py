"""Pure numpy/scipy versions of the step kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np
from scipy.linalg import expm


def expm_batch(omegas: np.ndarray) -> np.ndarray:
    omegas = np.asarray(omegas, dtype=np.complex128)
    if omegas.shape[0] == 0:
        return omegas.copy()
    return expm(omegas)


def chain_product(steps: np.ndarray, marks: np.ndarray, start: np.ndarray) -> np.ndarray:
    steps = np.asarray(steps, dtype=np.complex128)
    u = np.array(start, dtype=np.complex128)
    out = np.empty((len(marks),) + u.shape, dtype=np.complex128)
    done = 0
    for i, m in enumerate(marks):
        while done < m:
            u = steps[done] @ u
            done += 1
        out[i] = u
    return out


def expm_chain(omegas: np.ndarray, marks: np.ndarray, start: np.ndarray) -> np.ndarray:
    return chain_product(expm_batch(omegas), marks, start)
