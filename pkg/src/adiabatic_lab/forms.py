"""Operators given by symmetric sesquilinear forms, in Galerkin coordinates.

A basis of the form domain is fixed.  The H inner product is the Gram matrix
``gram_H``, the form a(t) is the Hermitian matrix ``form_t(t)`` and the form
inner product is a(t) + m <.,.>.  The dual embedding j: H -> H^- is ``gram_H``
in these coordinates, so A_0(t) solves gram_H A_0 = form_t(t).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._linalg import as_matrix, dagger, norm2
from .adiabatic import (FLOOR_FACTOR, HarnessResult, ProjectionCurve, SpectralScenario, make_sweep, nogap_harness)
from .errors import CapabilityError, ConditioningError, NearSingularityError, ScenarioError
from .evolution import DEFAULT_TOL, Propagator, build_propagator
from .operator_family import OperatorFamily, fd_stencil
from .spectral import verify_association

GRAM_COND_MAX = 1e12


class FormFamily:
    """Galerkin image of a family of closed symmetric forms with constant domain."""

    def __init__(self, gram_H, form_t: Callable[[np.ndarray], np.ndarray], m: float = 1.0,
                 smoothness: int = 2, form_derivs: Sequence[Callable] = (), name: str = "form",
                 check_grid: int = 33):
        G = as_matrix(gram_H)
        if norm2(G - dagger(G)) > 1e-12 * max(1.0, norm2(G)):
            raise ScenarioError("gram_H is not Hermitian", "gram_hermitian")
        ev = np.linalg.eigvalsh(G)
        if ev[0] <= 0:
            raise ScenarioError("gram_H is not positive definite", "gram_positive")
        if ev[-1] / ev[0] > GRAM_COND_MAX:
            raise ConditioningError(f"gram_H condition number {ev[-1] / ev[0]:.2e} exceeds {GRAM_COND_MAX:.0e}")
        if m <= 0:
            raise ValueError("shift m must be positive")
        self.gram_H = G
        self.dim = G.shape[0]
        self._form = form_t
        self.m = float(m)
        self.smoothness = int(smoothness)
        self.form_derivs = tuple(form_derivs)
        self.name = name
        self._Ginv = np.linalg.inv(G)
        self._L = np.linalg.cholesky(G)
        self._Linv = np.linalg.inv(self._L)
        grid = np.linspace(0.0, 1.0, check_grid)
        F = self.form_t(grid)
        if np.max(norm2(F - dagger(F))) > 1e-10 * max(1.0, float(np.max(norm2(F)))):
            raise ScenarioError("form_t(t) is not Hermitian", "form_hermitian")
        lo = min(np.linalg.eigvalsh(Gp)[0] for Gp in self.gram_Hplus_t(grid))
        if lo <= 1e-10:
            raise ScenarioError(f"a(t) + m<.,.> not uniformly positive (min eigenvalue {lo:.2e})", "hplus_positive")
        self.hplus_min_eig = float(lo)

    def form_t(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        return np.asarray(self._form(ts), dtype=np.complex128).reshape(len(ts), self.dim, self.dim)

    def gram_Hplus_t(self, ts) -> np.ndarray:
        return self.form_t(ts) + self.m * self.gram_H

    def gram_Hminus_t(self, ts) -> np.ndarray:
        """Gram matrix of the dual norm on H^- (functionals given by their values on the basis)."""
        return np.linalg.inv(self.gram_Hplus_t(ts))

    def gram_Hminus(self) -> np.ndarray:
        """The t-independent reference dual Gram matrix (taken at t = 0)."""
        return self.gram_Hminus_t([0.0])[0]

    def operator_many(self, ts) -> np.ndarray:
        return self._Ginv @ self.form_t(ts)

    def h_norm(self, X) -> np.ndarray:
        """Operator norm in H, batched."""
        return norm2(dagger(self._L) @ X @ dagger(self._Linv))

    def generator(self) -> OperatorFamily:
        """A(t) = (1/i) A_0(t)."""
        derivs = [lambda ts, f=f: -1j * (self._Ginv @ np.asarray(f(np.atleast_1d(ts))))
                  for f in self.form_derivs]
        return OperatorFamily(lambda ts: -1j * self.operator_many(ts), self.dim, self.smoothness, derivs,
                              name=f"(1/i)A_0[{self.name}]")


def operator_from_form(ff: FormFamily, t: float, tol: float = 1e-10) -> np.ndarray:
    """Matrix of A_0(t) in the basis: the solution of gram_H A_0 = form_t(t)."""
    A0 = ff.operator_many([t])[0]
    if self_adjointness_defect(ff, t, A0) > tol:
        raise ConditioningError(f"A_0({t}) fails gram_H self-adjointness")
    return A0


def self_adjointness_defect(ff: FormFamily, t: float, A0=None) -> float:
    A0 = ff.operator_many([t])[0] if A0 is None else A0
    G = ff.gram_H
    return norm2(G @ A0 - dagger(A0) @ G) / max(1.0, norm2(G @ A0))


@dataclass
class DualResolventReport:
    t: float
    z: complex
    defect: float
    direct: np.ndarray
    dual: np.ndarray


def dual_resolvent_identity_check(ff: FormFamily, t: float, z: complex, tol: float = 1e-12) -> DualResolventReport:
    """(A_0 - z)^{-1} computed directly and as (form - z gram_H)^{-1} gram_H."""
    A0 = ff.operator_many([t])[0]
    d = ff.dim
    M1 = A0 - z * np.eye(d)
    M2 = ff.form_t([t])[0] - z * ff.gram_H
    s1 = np.linalg.svd(M1, compute_uv=False)[-1] / max(1.0, norm2(A0))
    s2 = np.linalg.svd(M2, compute_uv=False)[-1] / max(1.0, norm2(ff.form_t([t])[0]))
    bad1, bad2 = s1 <= tol, s2 <= tol
    if bad1 or bad2:
        which = "both" if bad1 and bad2 else ("direct only" if bad1 else "dual only")
        raise NearSingularityError(f"z={z} is (numerically) in the spectrum of A_0({t}); {which} singular",
                                   float(min(s1, s2)))
    direct = np.linalg.inv(M1)
    dual = np.linalg.solve(M2, ff.gram_H)
    return DualResolventReport(t, z, norm2(direct - dual) / max(1.0, norm2(direct)), direct, dual)


def kisynski_propagate(ff: FormFamily, epsilon: float, grid, tol: float = DEFAULT_TOL,
                       scheme: str = "magnus6") -> Propagator:
    """Propagator of (1/eps)(1/i)A_0(t); ``unitarity_defect`` is max ||U* G U - G|| over the table."""
    if ff.smoothness < 2:
        raise CapabilityError("the form family must be at least twice differentiable")
    U = build_propagator(ff.generator(), epsilon, grid, tol, scheme, generator_id=ff.name)
    U.unitarity_defect = unitarity_defect(ff, U.from_start)
    return U


def unitarity_defect(ff: FormFamily, Us: np.ndarray) -> float:
    G = ff.gram_H
    return float(np.max(norm2(dagger(Us) @ G @ Us - G)) / norm2(G))


# form scenarios --------------------------------------------------------------------
@dataclass
class FormScenario:
    name: str
    form: FormFamily
    lambda_curve: Callable[[np.ndarray], np.ndarray]  # eigenvalue of A = (1/i) A_0
    projection_curve: ProjectionCurve
    crossing_set: tuple = ()
    description: str = ""
    default_epsilons: tuple = tuple(2.0 ** -k for k in range(3, 9))
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.form.dim

    @property
    def family(self) -> OperatorFamily:
        return self.form.generator()

    def lam(self, ts) -> np.ndarray:
        return np.asarray(self.lambda_curve(np.atleast_1d(np.asarray(ts, dtype=float))), dtype=np.complex128)

    def to_spectral(self) -> SpectralScenario:
        return SpectralScenario(self.name, self.form.generator(), self.lambda_curve, self.projection_curve,
                                gap_class="none" if self.crossing_set else "uniform",
                                crossing_set=tuple(self.crossing_set), m0=1, delta0=1.0, M_bound=1.0,
                                description=self.description, default_epsilons=self.default_epsilons)


def _away(ts, crossing_set, width=1e-9):
    ts = np.asarray(ts, dtype=float)
    mask = np.ones(len(ts), dtype=bool)
    for c in crossing_set:
        mask &= np.abs(ts - c) > width
    return mask


def form_invariants(fs: FormScenario, grid_points: int = 33, seed: int = 7, probes: int = 20) -> dict:
    """Self-adjointness, dual resolvent identity, eigen-inclusion and the trace formula for lambda."""
    ff = fs.form
    grid = np.linspace(0.0, 1.0, grid_points)
    A = ff.generator().eval_many(grid)
    lam = fs.lam(grid)
    P = fs.projection_curve.value(grid)
    d = ff.dim
    sa = max(self_adjointness_defect(ff, t) for t in grid)
    rng = np.random.default_rng(seed)
    dual = []
    A0s = ff.operator_many(grid)
    spec = np.linalg.eigvals(A0s)
    for _ in range(probes):
        t = float(rng.uniform())
        z = complex(rng.uniform(-2, 2) + spec.real.max() * rng.uniform(), rng.uniform(0.1, 2.0) * rng.choice([-1, 1]))
        dual.append(dual_resolvent_identity_check(ff, t, z).defect)
    incl = float(np.max(ff.h_norm((A - lam[:, None, None] * np.eye(d)) @ P)))
    # trace formula 1/(lambda - 1) = <P x0, (A - 1)^{-1} P x0> / <P x0, P x0> in the H inner product
    G = ff.gram_H
    x0 = rng.normal(size=d) + 1j * rng.normal(size=d)
    trace_err = 0.0
    for k, t in enumerate(grid):
        y = P[k] @ x0
        ny = (y.conj() @ G @ y).real
        if ny < 1e-12:
            continue
        w = np.linalg.solve(A[k] - np.eye(d), y)
        q = (y.conj() @ G @ w) / ny
        lam_rec = 1.0 + 1.0 / q
        trace_err = max(trace_err, abs(lam_rec - lam[k]))
    assoc = []
    for k in np.nonzero(_away(grid, fs.crossing_set))[0]:
        rep = verify_association(A[k], P[k], lam[k], "weakly_associated", tol=1e-8)
        assoc.append(max(rep.defects.values()))
    return {"self_adjointness": sa, "dual_resolvent_max": float(max(dual)), "dual_probes": probes,
            "eigen_inclusion": incl, "trace_formula": float(trace_err),
            "association_max": float(max(assoc)) if assoc else 0.0, "seed": seed}


@dataclass
class DeltaProbeReport:
    deltas: list
    resolvent_sup: list  # sup_t ||Rbar_delta|| (H-norm)
    derivative_sup: list  # sup_t ||d/dt Rbar_delta||
    resolvent_exponent: float
    derivative_exponent: float
    excluded: list
    notes: list

    @property
    def scaled_resolvent(self):
        return [d * r for d, r in zip(self.deltas, self.resolvent_sup)]

    @property
    def scaled_derivative(self):
        return [d * d * r for d, r in zip(self.deltas, self.derivative_sup)]

    def passed(self, slack: float = 0.1) -> bool:
        return self.resolvent_exponent <= 1 + slack and self.derivative_exponent <= 2 + slack


def _growth_exponent(deltas, values, zero=1e-10) -> float:
    d = np.asarray(deltas, dtype=float)
    v = np.asarray(values, dtype=float)
    if np.all(v <= zero) or len(d) < 2:
        return 0.0
    keep = v > zero
    if keep.sum() < 2:
        return 0.0
    return float(-np.polyfit(np.log(d[keep]), np.log(v[keep]), 1)[0])


def delta_resolvent_probe(ff: FormFamily, lambda_curve, P_curve: ProjectionCurve, delta_list, grid=None,
                          delta0: float = 1.0, h: float = 1e-4) -> DeltaProbeReport:
    """Growth in 1/delta of (lambda + delta - A)^{-1}(1 - P) and of its t-derivative."""
    grid = np.linspace(0.0, 1.0, 65) if grid is None else np.asarray(grid, dtype=float)
    gen = ff.generator()
    d = ff.dim
    I = np.eye(d)
    used, excluded, notes = [], [], []
    for dl in delta_list:
        if 0 < dl <= delta0:
            used.append(float(dl))
        else:
            excluded.append(float(dl))
            notes.append(f"delta={dl} outside (0, {delta0}]")

    def rbar(ts, dl):
        A = gen.eval_many(ts)
        lam = np.asarray(lambda_curve(ts), dtype=np.complex128)
        return np.linalg.solve((lam + dl)[:, None, None] * I - A, I - P_curve.value(ts))

    res, der = [], []
    for dl in used:
        R = rbar(grid, dl)
        res.append(float(np.max(ff.h_norm(R))))
        D = []
        for t in grid:
            offs, w = fd_stencil(float(t), 1, h)
            D.append(np.tensordot(w, rbar(np.clip(t + offs * h, 0, 1), dl), axes=(0, 0)))
        der.append(float(np.max(ff.h_norm(np.stack(D)))))
    return DeltaProbeReport(used, res, der, _growth_exponent(used, res), _growth_exponent(used, der),
                            excluded, notes)


def form_nogap_harness(fs: FormScenario, epsilon_list=None, grid_points: int = 65, tol: float = 1e-10,
                       with_V: bool = True, seed: int = 1234, tighten: bool = True) -> HarnessResult:
    """No-gap sweeps for a form scenario, with norms and the Bornemann test taken in H."""
    grid = np.linspace(0.0, 1.0, 33)
    A = fs.family.eval_many(grid)
    lam = fs.lam(grid)
    P = fs.projection_curve.value(grid)
    ranks = {int(np.rint(np.trace(p).real)) for p in P}
    if len(ranks) != 1:
        raise ScenarioError("projection rank is not constant", "rank")
    for k in np.nonzero(_away(grid, fs.crossing_set))[0]:
        rep = verify_association(A[k], P[k], lam[k], "weakly_associated", tol=1e-8)
        if not rep.passed:
            raise ScenarioError(f"P({grid[k]}) not weakly associated: {rep.failures}", "association")
    res = nogap_harness(fs.to_spectral(), epsilon_list if epsilon_list is not None else fs.default_epsilons,
                        grid_points, tol, tighten=tighten, seed=seed, gram=fs.form.gram_H, with_V=with_V)
    res.harness = "forms"
    for sw in res.sweeps.values():
        sw.harness = "forms"
    return res


# built-in: sine modes with a separable potential --------------------------------------
def sine_mode_crossing(dim: int = 16, name: str = "S6") -> FormScenario:
    """Dirichlet form on (0, pi) in the basis sin(kx)/k, k = 1..dim, plus v(t)|c><c|.

    The basis is not H-orthonormal: gram_H = diag(pi/(2k^2)) and the stiffness part is
    (pi/2) I.  The potential couples modes 1 and 3 only; with v(t) = 6 + 18 t the lower
    eigenvalue of that block is (10 + v - sqrt(v^2 + 64))/2, which crosses the decoupled
    level k^2 = 4 at t = 1/2.
    """
    if dim < 4:
        raise ValueError("need at least 4 modes")
    k = np.arange(1, dim + 1)
    G = np.diag(np.pi / (2.0 * k**2)).astype(np.complex128)
    Gh = np.sqrt(np.diag(G).real)
    S = (np.pi / 2) * np.eye(dim)
    w = np.zeros(dim)
    w[0] = w[2] = 1 / np.sqrt(2)
    c = Gh * w  # potential vector in form coordinates
    C = np.outer(c, c)

    def v(ts):
        return 6.0 + 18.0 * np.asarray(ts)

    def form(ts):
        return S[None] + v(ts)[:, None, None] * C[None]

    ff = FormFamily(G, form, m=1.0, smoothness=8, form_derivs=[lambda ts: 18.0 * np.broadcast_to(C, (len(ts),) + C.shape)],
                    name=name)

    def lam0(ts):
        vv = v(ts)
        return (10 + vv - np.sqrt(vv**2 + 64)) / 2

    def beta(ts):
        # eigenvector (cos b, sin b) of the 2x2 block in H-orthonormal coordinates
        vv = v(ts)
        return np.arctan2(lam0(ts) - 1 - vv / 2, vv / 2)

    def beta_prime(ts):
        vv = v(ts)
        lp = 0.5 * (1 - vv / np.sqrt(vv**2 + 64)) * 18.0
        l0 = lam0(ts)
        tanb = 2 * (l0 - 1) / vv - 1
        return (2 * lp / vv - 2 * (l0 - 1) * 18.0 / vv**2) / (1 + tanb**2)

    Ghm = 1 / Gh

    def to_x(Py):
        return Ghm[None, :, None] * Py * Gh[None, None, :]

    def Pval(ts):
        b = beta(ts)
        u = np.zeros((len(ts), dim))
        u[:, 0], u[:, 2] = np.cos(b), np.sin(b)
        return to_x(np.einsum("ti,tj->tij", u, u))

    def Pder(ts):
        b = beta(ts)
        bp = beta_prime(ts)
        u = np.zeros((len(ts), dim))
        up = np.zeros((len(ts), dim))
        u[:, 0], u[:, 2] = np.cos(b), np.sin(b)
        up[:, 0], up[:, 2] = -np.sin(b) * bp, np.cos(b) * bp
        return to_x(np.einsum("ti,tj->tij", up, u) + np.einsum("ti,tj->tij", u, up))

    return FormScenario(name, ff, lambda ts: -1j * lam0(ts), ProjectionCurve(Pval, Pder, "P_S6"), (0.5,),
                        "sine-mode Dirichlet form with a rank-one potential whose lower branch crosses k=2 at t=1/2")
