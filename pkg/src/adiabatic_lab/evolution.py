"""Evolution systems U(t, s) for x' = (1/eps) A(t) x and their perturbations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from . import kernels
from ._linalg import norm2
from .errors import DomainError, ResourceError, SeriesDivergenceError, UsageError
from .operator_family import OperatorFamily

Epsilon = Union[float, str, None]  # positive float or "unscaled"/None

SCHEME_ORDER = {"magnus6": 6, "magnus4": 4, "rk4": 4}
DEFAULT_TOL = 1e-10
MAX_STEPS = 1 << 23
_CHUNK = 1 << 15

_G3 = np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10])
_G2 = np.array([0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6])


def as_generator(g) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised callable ts -> (n, d, d) from a family or a plain callable."""
    if isinstance(g, OperatorFamily):
        return g.eval_many
    if not callable(g):
        raise TypeError("generator must be an OperatorFamily or a callable")

    def f(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.asarray(g(ts), dtype=np.complex128)
        if out.ndim == 3 and out.shape[0] == len(ts):
            return out
        return np.stack([np.asarray(g(float(t)), dtype=np.complex128) for t in ts])

    return f


def _scale_of(epsilon: Epsilon) -> float:
    if epsilon is None or epsilon == "unscaled":
        return 1.0
    eps = float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    return 1.0 / eps


@dataclass
class Flow:
    """Full right-hand side G(t) = scale * A(t) plus step policy."""

    gen: Callable[[np.ndarray], np.ndarray]
    dim: int
    scale: float = 1.0
    h_max: float = 0.25
    scheme: str = "magnus6"
    name: str = "generator"

    def __call__(self, ts):
        return self.scale * self.gen(ts)

    @classmethod
    def build(cls, generator, epsilon: Epsilon, scheme: str = "magnus6", name: str = "") -> "Flow":
        if scheme not in SCHEME_ORDER:
            raise ValueError(f"unknown scheme {scheme!r}; choose from {sorted(SCHEME_ORDER)}")
        gen = as_generator(generator)
        probe = gen(np.linspace(0.0, 1.0, 17))
        scale = _scale_of(epsilon)
        # keep h*|G| <= 1, well inside the Magnus convergence radius; step doubling does the rest
        L = scale * max(1.0, float(np.max(norm2(probe))))
        h_max = 1.0 / L
        nm = name or getattr(generator, "name", "") or "generator"
        return cls(gen, probe.shape[-1], scale, h_max, scheme, nm)


def _step_maps(flow: Flow, tl: np.ndarray, h: np.ndarray):
    """Per-step exponents (Magnus) or one-step maps (rk4) for steps [tl, tl+h]."""
    hh = h[:, None, None]
    if flow.scheme == "magnus6":
        A1, A2, A3 = (flow(tl + c * h) for c in _G3)
        a1 = hh * A2
        a2 = (np.sqrt(15) / 3) * hh * (A3 - A1)
        a3 = (10.0 / 3) * hh * (A3 - 2 * A2 + A1)
        C1 = a1 @ a2 - a2 @ a1
        X = 2 * a3 + C1
        C2 = -(a1 @ X - X @ a1) / 60
        Y, Z = -20 * a1 - a3 + C1, a2 + C2
        return a1 + a3 / 12 + (Y @ Z - Z @ Y) / 240
    if flow.scheme == "magnus4":
        A1, A2 = (flow(tl + c * h) for c in _G2)
        S = A1 @ A2 - A2 @ A1
        return hh * (A1 + A2) / 2 - (np.sqrt(3) / 12) * hh**2 * S
    A1, A2, A3 = flow(tl), flow(tl + h / 2), flow(tl + h)
    I = np.eye(flow.dim)
    M1 = A1
    M2 = A2 @ (I + hh / 2 * M1)
    M3 = A2 @ (I + hh / 2 * M2)
    M4 = A3 @ (I + hh * M3)
    return I + hh / 6 * (M1 + 2 * M2 + 2 * M3 + M4)


def _run(flow: Flow, grid: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Snapshots U(grid[k], grid[0]) with counts[k] equal steps on segment k."""
    d = flow.dim
    tl_all = np.concatenate([a + (b - a) * np.arange(n) / n for a, b, n in zip(grid[:-1], grid[1:], counts)])
    h_all = np.repeat(np.diff(grid) / counts, counts)
    marks_all = np.concatenate([[0], np.cumsum(counts)])
    snaps = np.empty((len(grid), d, d), dtype=np.complex128)
    snaps[0] = np.eye(d)
    U = np.eye(d, dtype=np.complex128)
    done = 0
    total = len(tl_all)
    si = 1
    while done < total:
        stop = min(total, done + _CHUNK)
        maps = _step_maps(flow, tl_all[done:stop], h_all[done:stop])
        # snapshots falling inside this chunk
        hi = si
        while hi < len(marks_all) and marks_all[hi] <= stop:
            hi += 1
        marks = np.append(marks_all[si:hi] - done, stop - done)
        if flow.scheme == "rk4":
            out = kernels.chain_product(maps, marks, U)
        else:
            out = kernels.expm_chain(maps, marks, U)
        snaps[si:hi] = out[:-1]
        U = out[-1]
        si = hi
        done = stop
    return snaps


@dataclass
class RunInfo:
    error_estimate: float
    steps: int
    tol: float
    tol_met: bool


def adaptive_run(flow: Flow, grid, tol: float, max_steps: int = MAX_STEPS, h0: Optional[float] = None):
    """Step-doubling control: halve h until ||U_h - U_{h/2}|| / (2^p - 1) <= tol at every snapshot."""
    grid = np.asarray(grid, dtype=float)
    p = SCHEME_ORDER[flow.scheme]
    h = flow.h_max if h0 is None else min(h0, flow.h_max)
    counts = np.maximum(1, np.ceil(np.diff(grid) / h - 1e-9).astype(int))
    coarse = _run(flow, grid, counts)
    errs = []
    while True:
        counts = counts * 2
        if counts.sum() > max_steps:
            raise ResourceError(
                f"step budget exhausted for {flow.name}: {counts.sum()} steps needed, last error "
                f"estimate {errs[-1] if errs else float('nan'):.2e} vs tol {tol:.1e}"
            )
        fine = _run(flow, grid, counts)
        err = float(np.max(norm2(fine - coarse))) / (2**p - 1)
        errs.append(err)
        if err <= tol:
            return fine, RunInfo(err, int(counts.sum()), tol, True)
        # roundoff floor: doubling no longer helps
        if len(errs) >= 3 and errs[-1] > 0.5 * errs[-2] and errs[-2] > 0.5 * errs[-3]:
            return fine, RunInfo(err, int(counts.sum()), tol, False)
        coarse = fine


def propagate(generator, epsilon: Epsilon, s: float, t: float, tol: float = DEFAULT_TOL,
              scheme: str = "magnus6", flow: Optional[Flow] = None) -> np.ndarray:
    """U(t, s) for U' = (1/eps) A(tau) U (or A(tau) U when unscaled)."""
    if not 0 <= s <= t <= 1:
        raise DomainError(f"need 0 <= s <= t <= 1, got s={s}, t={t}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    flow = flow or Flow.build(generator, epsilon, scheme)
    if s == t:
        return np.eye(flow.dim, dtype=np.complex128)
    snaps, _ = adaptive_run(flow, np.array([s, t]), tol)
    return snaps[-1]


class Propagator:
    """Tabulated evolution system on a grid.

    ``from_start[k]`` is U(grid[k], grid[0]) from one continuous run.  Any other
    U(t, s) is obtained by a fresh propagation from s (cached); table entries
    are never inverted or composed to produce new ones.
    """

    def __init__(self, flow: Flow, grid, from_start, info: RunInfo, epsilon: Epsilon, generator_id: str):
        self.flow = flow
        self.grid = np.asarray(grid, dtype=float)
        self.from_start = from_start
        self.info = info
        self.tol = info.tol
        self.epsilon = "unscaled" if epsilon is None else epsilon
        self.generator_id = generator_id
        self._cache: dict = {}
        self._index = {float(t): k for k, t in enumerate(self.grid)}

    @property
    def dim(self) -> int:
        return self.flow.dim

    @property
    def error_estimate(self) -> float:
        return self.info.error_estimate

    def __call__(self, t: float, s: Optional[float] = None) -> np.ndarray:
        s = float(self.grid[0]) if s is None else float(s)
        t = float(t)
        if not (0 <= s <= t <= 1):
            raise DomainError(f"need 0 <= s <= t <= 1, got s={s}, t={t}")
        if s == t:
            return np.eye(self.dim, dtype=np.complex128)
        if s == self.grid[0] and t in self._index:
            return self.from_start[self._index[t]]
        key = (s, t)
        if key not in self._cache:
            # independent step sequence: start from a different initial step
            snaps, _ = adaptive_run(self.flow, np.array([s, t]), self.tol, h0=0.7 * self.flow.h_max)
            self._cache[key] = snaps[-1]
        return self._cache[key]

    def from_points(self, s: float, ts: Sequence[float]) -> np.ndarray:
        """U(t, s) for every t in ``ts`` (ascending, >= s) from a single fresh run."""
        ts = np.asarray(ts, dtype=float)
        if s == self.grid[0] and all(float(t) in self._index for t in ts):
            return self.from_start[[self._index[float(t)] for t in ts]]
        pts = np.unique(np.concatenate([[s], ts]))
        snaps, _ = adaptive_run(self.flow, pts, self.tol, h0=0.7 * self.flow.h_max)
        lookup = {float(p): snaps[k] for k, p in enumerate(pts)}
        return np.stack([lookup[float(t)] for t in ts])

    @property
    def table(self) -> dict:
        out = {(float(self.grid[0]), float(t)): self.from_start[k] for k, t in enumerate(self.grid)}
        out.update(self._cache)
        return out

    def cocycle_residual(self, triples: Optional[Iterable] = None) -> float:
        """max ||U(t,r) - U(t,s) U(s,r)|| over grid triples r <= s <= t."""
        if triples is None:
            g = self.grid
            triples = [(g[i], g[j], g[k]) for i in range(len(g)) for j in range(i, len(g)) for k in range(j, len(g))]
        worst = 0.0
        for r, s, t in triples:
            worst = max(worst, norm2(self(t, r) - self(t, s) @ self(s, r)))
        return worst


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or len(g) < 2 or np.any(np.diff(g) <= 0):
        raise DomainError("grid must be strictly increasing with at least two points")
    if g[0] != 0.0 or g[-1] != 1.0:
        raise DomainError("grid must contain 0 and 1 as endpoints")
    return g


def build_propagator(generator, epsilon: Epsilon, grid, tol: float = DEFAULT_TOL,
                     scheme: str = "magnus6", generator_id: str = "", flow: Optional[Flow] = None) -> Propagator:
    """Continuous run from 0 tabulating U(t_k, 0) on ``grid``."""
    grid = _check_grid(grid)
    flow = flow or Flow.build(generator, epsilon, scheme, generator_id)
    snaps, info = adaptive_run(flow, grid, tol)
    return Propagator(flow, grid, snaps, info, epsilon, generator_id or flow.name)


def right_derivative_defect(U: Propagator, A, s: float, t: float, x, h: float = 1e-4) -> float:
    """||(U(t,s+h)x - U(t,s)x)/h + U(t,s) G(s) x|| with G the propagated generator."""
    if not s < t:
        raise DomainError("need s < t")
    if s + h > t:
        raise DomainError(f"probe step s+h={s + h} beyond t={t}")
    x = np.asarray(x, dtype=np.complex128)
    if not np.any(x):
        return 0.0
    gen = as_generator(A)
    G = U.flow.scale * gen(np.array([s]))[0]
    Uts = U(t, s)
    return float(np.linalg.norm((U(t, s + h) @ x - Uts @ x) / h + Uts @ G @ x))


# perturbations ------------------------------------------------------------------
@dataclass
class SeriesInfo:
    terms: int
    term_norms: list = field(default_factory=list)


def perturbed_propagator(U_base: Propagator, B, tol: Optional[float] = None, method: str = "direct",
                         max_terms: int = 256) -> Propagator:
    """V with V(t,s) = U(t,s) + int_s^t U(t,tau) B(tau) V(tau,s) dtau.

    ``direct`` propagates the generator of U plus B.  ``series`` sums the Dyson
    terms V_n; each V_n is obtained exactly as a block of the propagator of the
    block-bidiagonal generator [[G,0,..],[B,G,..],[0,B,G,..]], and terms are
    added until the newest one is below tol on the whole grid.
    """
    tol = U_base.tol if tol is None else tol
    base = U_base.flow
    Bg = as_generator(B)
    d = base.dim

    def vgen(ts, base=base, Bg=Bg):
        return base(ts) + Bg(ts)

    probe = Bg(np.linspace(0, 1, 17))
    bnorm = float(np.max(norm2(probe)))
    L = max(1.0 / base.h_max / 4, float(np.max(norm2(base(np.linspace(0, 1, 17))))) + bnorm)
    vflow = Flow(vgen, d, 1.0, min(base.h_max, 0.25 / L), base.scheme, f"{base.name}+B")
    if method == "direct":
        snaps, info = adaptive_run(vflow, U_base.grid, tol)
        V = Propagator(vflow, U_base.grid, snaps, info, U_base.epsilon, vflow.name)
        V.series = None
        return V
    if method != "series":
        raise ValueError("method must be 'direct' or 'series'")
    n = 8
    while True:
        N = n + 1

        def bgen(ts, N=N):
            G = base(ts)
            Bt = Bg(ts)
            out = np.zeros((len(ts), N * d, N * d), dtype=np.complex128)
            for k in range(N):
                out[:, k * d:(k + 1) * d, k * d:(k + 1) * d] = G
                if k:
                    out[:, k * d:(k + 1) * d, (k - 1) * d:k * d] = Bt
            return out

        bflow = Flow(bgen, N * d, 1.0, vflow.h_max, base.scheme, f"{base.name}+B series")
        snaps, info = adaptive_run(bflow, U_base.grid, tol / 4)
        terms = snaps[:, :, :d].reshape(len(U_base.grid), N, d, d)
        tn = [float(np.max(norm2(terms[:, k]))) for k in range(N)]
        if tn[-1] <= tol:
            V = Propagator(vflow, U_base.grid, terms.sum(axis=1), info, U_base.epsilon, vflow.name + " (series)")
            V.series = SeriesInfo(N, tn)
            return V
        n *= 2
        if n > max_terms:
            raise SeriesDivergenceError(f"perturbation series not below tol after {N} terms (last {tn[-1]:.2e})")


@dataclass
class BoundReport:
    M: float
    omega: float
    b: float
    worst_ratio: float  # max ||V(t,s)|| / (M exp((omega + M b)(t-s)))
    pairs: int

    def holds(self, rel: float = 1e-6) -> bool:
        return self.worst_ratio <= 1 + rel


def perturbation_bound_check(U: Propagator, V: Propagator, b: float, starts: Sequence[float] = (0.0,),
                             omega: float = 0.0) -> BoundReport:
    """Check ||V(t,s)|| <= M e^{(omega + M b)(t-s)} with M measured from U on the same pairs."""
    pairs = []
    for s in starts:
        ts = U.grid[U.grid >= s]
        Us = U.from_points(s, ts)
        Vs = V.from_points(s, ts)
        pairs.extend(zip(ts - s, norm2(Us), norm2(Vs)))
    pairs = np.array(pairs)
    M = max(1.0, float(np.max(pairs[:, 1] * np.exp(-omega * pairs[:, 0]))))
    ratio = pairs[:, 2] / (M * np.exp((omega + M * b) * pairs[:, 0]))
    return BoundReport(M, omega, b, float(np.max(ratio)), len(pairs))
