"""Time-dependent matrix families A(t) on [0, 1] and their derivatives."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ._linalg import as_matrix, norm2
from .errors import CapabilityError, DomainError

Smoothness = Union[int, str]  # nonnegative int or "analytic"

_T_SLACK = 1e-12


def _check_t(t) -> np.ndarray:
    ta = np.asarray(t, dtype=float)
    if np.any(ta < -_T_SLACK) or np.any(ta > 1 + _T_SLACK) or not np.all(np.isfinite(ta)):
        raise DomainError(f"t must lie in [0, 1], got {t!r}")
    return np.clip(ta, 0.0, 1.0)


def _smooth_order(s: Smoothness) -> float:
    return np.inf if s == "analytic" else int(s)


class OperatorFamily:
    """A map t -> A(t) with optional closed-form derivatives.

    ``func`` must accept a 1-D float array of times and return an array of shape
    (n, dim, dim); scalar calls are handled here.  ``derivs[k-1]`` is the k-th
    derivative in the same calling convention.  ``analytic_extension`` takes
    complex times and is required when ``smoothness == "analytic"``.
    """

    def __init__(
        self,
        func: Callable[[np.ndarray], np.ndarray],
        dim: int,
        smoothness: Smoothness = 2,
        derivs: Sequence[Callable] = (),
        analytic_extension: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        name: str = "",
    ):
        if dim < 1:
            raise ValueError("dim must be positive")
        if smoothness != "analytic" and (not isinstance(smoothness, (int, np.integer)) or smoothness < 0):
            raise ValueError("smoothness must be a nonnegative integer or 'analytic'")
        if smoothness == "analytic" and analytic_extension is None:
            raise CapabilityError("analytic smoothness needs an analytic_extension")
        self._func = func
        self.dim = int(dim)
        self.smoothness = smoothness
        self.derivs = tuple(derivs)
        self.analytic_extension = analytic_extension
        self.name = name or "family"

    # evaluation ---------------------------------------------------------
    def _call(self, f, ts: np.ndarray) -> np.ndarray:
        out = np.asarray(f(ts), dtype=np.complex128)
        if out.shape != (len(ts), self.dim, self.dim):
            # tolerate scalar-only callables
            out = np.stack([np.asarray(f(float(x)), dtype=np.complex128) for x in ts])
        return out

    def eval_many(self, ts) -> np.ndarray:
        ts = np.atleast_1d(_check_t(ts)).astype(float)
        return self._call(self._func, ts)

    def __call__(self, t) -> np.ndarray:
        if np.ndim(t) == 0:
            return self.eval_many(np.array([float(t)]))[0]
        return self.eval_many(t)

    def has_derivative(self, order: int) -> bool:
        return 1 <= order <= len(self.derivs)

    def closed_derivative(self, order: int, ts) -> np.ndarray:
        ts = np.atleast_1d(_check_t(ts)).astype(float)
        return self._call(self.derivs[order - 1], ts)

    def eval_complex(self, zs) -> np.ndarray:
        if self.analytic_extension is None:
            raise CapabilityError(f"{self.name} has no analytic extension")
        zs = np.atleast_1d(np.asarray(zs, dtype=np.complex128))
        out = np.asarray(self.analytic_extension(zs), dtype=np.complex128)
        return out.reshape(len(zs), self.dim, self.dim)

    def with_name(self, name: str) -> "OperatorFamily":
        return OperatorFamily(self._func, self.dim, self.smoothness, self.derivs, self.analytic_extension, name)


def constant_family(matrix, name: str = "constant") -> OperatorFamily:
    m = as_matrix(matrix)
    zero = np.zeros_like(m)
    return OperatorFamily(
        lambda ts: np.broadcast_to(m, (len(np.atleast_1d(ts)),) + m.shape).copy(),
        m.shape[0],
        "analytic",
        derivs=[lambda ts, z=zero: np.broadcast_to(z, (len(np.atleast_1d(ts)),) + z.shape).copy()] * 4,
        analytic_extension=lambda zs: np.broadcast_to(m, (len(np.atleast_1d(zs)),) + m.shape).copy(),
        name=name,
    )


def scalar_times_family(f, fprimes: Sequence[Callable], matrix, smoothness: Smoothness = "analytic", name="f(t)M"):
    """A(t) = f(t) M; ``f`` must be numpy-vectorised (and complex-capable if analytic)."""
    m = as_matrix(matrix)

    def make(g):
        return lambda ts: np.asarray(g(np.asarray(ts)))[..., None, None] * m

    return OperatorFamily(make(f), m.shape[0], smoothness, [make(g) for g in fprimes],
                          analytic_extension=make(f) if smoothness == "analytic" else None, name=name)


def eval_operator(family: OperatorFamily, t: float) -> np.ndarray:
    """A(t) for a single t in [0, 1]."""
    if np.ndim(t) != 0:
        raise DomainError("eval_operator takes a scalar t")
    return family(float(t))


# finite differences ------------------------------------------------------
def _fd_weights(offsets: np.ndarray, order: int) -> np.ndarray:
    # solve the moment conditions sum_j w_j o_j^p = p! delta_{p,order}
    n = len(offsets)
    V = np.vander(offsets.astype(float), n, increasing=True).T
    rhs = np.zeros(n)
    rhs[order] = factorial(order)
    return np.linalg.solve(V, rhs)


def fd_stencil(t: float, order: int, h: float):
    """Order-4 accurate stencil offsets (in units of h) and weights, one-sided near 0 and 1."""
    p = (order - 1) // 2 + 2
    central = np.arange(-p, p + 1)
    if t - p * h >= 0 and t + p * h <= 1:
        offs = central
    elif t - p * h < 0:
        offs = np.arange(0, order + 4)
    else:
        offs = -np.arange(0, order + 4)[::-1]
    return offs, _fd_weights(offs, order) / h**order


def default_fd_step(t: float, order: int) -> float:
    base = 1e-4 if order == 1 else np.finfo(float).eps ** (1.0 / (order + 4))
    return base * max(1.0, abs(t))


@dataclass(frozen=True)
class Derivative:
    matrix: np.ndarray
    source: str  # "closed_form" or "finite_difference"
    h: float = 0.0
    error_estimate: float = 0.0


def fd_derivative(f: Callable[[np.ndarray], np.ndarray], t: float, order: int, h: float | None = None) -> Derivative:
    """Central (or one-sided at the ends) order-4 finite difference of a vectorised f."""
    h = default_fd_step(t, order) if h is None else h

    def apply(hh):
        offs, w = fd_stencil(t, order, hh)
        vals = np.asarray(f(t + offs * hh))
        # weights sum to zero: differencing against one sample is exact for constants
        return np.tensordot(w, vals - vals[:1], axes=(0, 0))

    d1 = apply(h)
    d2 = apply(2 * h)
    return Derivative(d1, "finite_difference", h, float(np.max(np.abs(d1 - d2))) / 15.0)


def eval_derivative(family: OperatorFamily, t: float, order: int, allow_fd: bool = False) -> Derivative:
    """d^order/dt^order A(t); finite differences only when ``allow_fd`` or declared smooth enough."""
    if order < 1:
        raise ValueError("order must be positive")
    t = float(_check_t(t))
    if family.has_derivative(order):
        return Derivative(family.closed_derivative(order, [t])[0], "closed_form")
    if order > _smooth_order(family.smoothness) and not allow_fd:
        raise CapabilityError(f"{family.name}: order {order} exceeds declared smoothness {family.smoothness}")
    return fd_derivative(family.eval_many, t, order)


@dataclass
class SmoothnessReport:
    orders: list
    grid: np.ndarray
    defects: np.ndarray  # (orders, grid) relative defects
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(np.all(self.defects <= self.tol))

    @property
    def max_defect(self) -> float:
        return float(np.max(self.defects)) if self.defects.size else 0.0


def validate_smoothness(family: OperatorFamily, n: int, grid, tol: float = 1e-6) -> SmoothnessReport:
    """Compare declared derivative maps against finite differences on ``grid``."""
    grid = np.atleast_1d(_check_t(grid)).astype(float)
    orders = [k for k in range(1, n + 1) if family.has_derivative(k)]
    defects = np.zeros((len(orders), len(grid)))
    for i, k in enumerate(orders):
        closed = family.closed_derivative(k, grid)
        for j, t in enumerate(grid):
            fd = fd_derivative(family.eval_many, t, k).matrix
            scale = max(1.0, norm2(closed[j]), norm2(fd))
            defects[i, j] = norm2(closed[j] - fd) / scale
    return SmoothnessReport(orders, grid, defects, tol)


# Taylor jets ---------------------------------------------------------------
def taylor_jets(family: OperatorFamily, ts, order: int, radius: float = 0.05, nodes: int = 64) -> np.ndarray:
    """Taylor coefficients A^(j)(t)/j!, j = 0..order, shape (len(ts), order+1, d, d).

    Analytic families use the Cauchy integral over a circle of ``radius`` in the
    complex t-plane (trapezoid rule, spectrally accurate); otherwise declared
    derivative maps are used and a CapabilityError is raised if they run out.
    """
    ts = np.atleast_1d(_check_t(ts)).astype(float)
    if family.analytic_extension is not None:
        th = 2 * np.pi * np.arange(nodes) / nodes
        w = np.exp(1j * th)
        zs = (ts[:, None] + radius * w[None, :]).ravel()
        vals = family.eval_complex(zs).reshape(len(ts), nodes, family.dim, family.dim)
        powers = w[None, :] ** (-np.arange(order + 1)[:, None])  # (order+1, nodes)
        jets = np.einsum("jm,tmab->tjab", powers, vals) / nodes
        jets /= (radius ** np.arange(order + 1))[None, :, None, None]
        jets[:, 0] = family.eval_many(ts)
        return jets
    if order > len(family.derivs):
        raise CapabilityError(f"{family.name}: jets of order {order} need an analytic extension")
    out = np.empty((len(ts), order + 1, family.dim, family.dim), dtype=np.complex128)
    out[:, 0] = family.eval_many(ts)
    for j in range(1, order + 1):
        out[:, j] = family.closed_derivative(j, ts) / factorial(j)
    return out
