"""Kato generator, commutator solvers and defect harnesses for the gap and no-gap cases."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.integrate as sint
import scipy.linalg as sla

from ._linalg import as_matrix, comm, dagger, norm2
from .errors import (NearSingularityError, RayViolationError, UnderdeterminedFitError, UsageError)
from .evolution import DEFAULT_TOL, Flow, Propagator, adaptive_run, build_propagator
from .operator_family import OperatorFamily, fd_stencil
from .spectral import Contour, contour_integral, riesz_projection

FLOOR_FACTOR = 10.0  # integrator floor = 10 * tol; fits drop samples below 10 * floor
TOL_MIN = 1e-13


# projection curves and scenarios -----------------------------------------------
class ProjectionCurve:
    """t -> P(t) with closed-form derivative when available (else order-4 differences)."""

    def __init__(self, value: Callable[[np.ndarray], np.ndarray],
                 derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None, name: str = "P"):
        self._value = value
        self._derivative = derivative
        self.name = name
        self.derivative_source = "closed_form" if derivative is not None else "finite_difference"

    def value(self, ts) -> np.ndarray:
        return np.asarray(self._value(np.atleast_1d(np.asarray(ts, dtype=float))), dtype=np.complex128)

    def __call__(self, t):
        if np.ndim(t) == 0:
            return self.value([float(t)])[0]
        return self.value(t)

    def derivative(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if self._derivative is not None:
            return np.asarray(self._derivative(ts), dtype=np.complex128)
        return _fd_many(self.value, ts, 1)

    def complement(self) -> "ProjectionCurve":
        d = self._derivative
        return ProjectionCurve(lambda ts: np.eye(self.value([0.0]).shape[-1]) - self._value(ts),
                               (lambda ts: -d(ts)) if d is not None else None, f"1-{self.name}")


def _fd_many(f, ts, order, h=1e-4):
    out = []
    for t in ts:
        offs, w = fd_stencil(float(t), order, h)
        out.append(np.tensordot(w, f(t + offs * h), axes=(0, 0)))
    return np.stack(out)


@dataclass
class SpectralScenario:
    """A family together with the spectral data followed by the harnesses."""

    name: str
    family: OperatorFamily
    lambda_curve: Callable[[np.ndarray], np.ndarray]
    projection_curve: ProjectionCurve
    gap_class: str = "uniform"  # uniform | nonuniform | none
    crossing_set: tuple = ()
    m0: int = 1
    theta_curve: Callable[[np.ndarray], np.ndarray] = lambda ts: np.zeros(np.shape(ts))
    delta0: float = 0.5
    M_bound: float = 1.0
    contour_radius: Optional[float] = None  # Riesz circle radius around lambda(t), gap scenarios only
    min_gap: Optional[float] = None
    description: str = ""
    default_epsilons: tuple = tuple(2.0 ** -k for k in range(3, 11))
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.family.dim

    def lam(self, ts) -> np.ndarray:
        return np.asarray(self.lambda_curve(np.atleast_1d(np.asarray(ts, dtype=float))), dtype=np.complex128)

    def kato(self, ts) -> np.ndarray:
        P = self.projection_curve.value(ts)
        Pp = self.projection_curve.derivative(ts)
        return Pp @ P - P @ Pp

    def contour(self, t: float, nodes: int = 32) -> Contour:
        if self.contour_radius is None:
            raise UsageError(f"scenario {self.name} has no contour radius (no uniform gap)")
        return Contour("circle", complex(self.lam([t])[0]), self.contour_radius, (), nodes)


# Kato generator and commutator equation ------------------------------------------
def kato_generator(P_curve: ProjectionCurve, t: float, return_defect: bool = False):
    """K(t) = [P'(t), P(t)]; optionally also ||P P' P|| (which vanishes for projections)."""
    P = P_curve(float(t))
    Pp = P_curve.derivative([float(t)])[0]
    K = Pp @ P - P @ Pp
    if return_defect:
        return K, norm2(P @ Pp @ P)
    return K


@dataclass
class CommutatorResult:
    B: np.ndarray
    P: np.ndarray
    residual: float  # ||B A - A B - [P', P]||
    nodes_used: int


def commutator_B(A, Pprime, gamma: Contour, tol: float = 1e-12) -> CommutatorResult:
    """B = (1/2 pi i) \\oint R(z) P' R(z) dz, the solution of B A - A B = [P', P]."""
    A = as_matrix(A)
    Pp = as_matrix(Pprime, A.shape[0])
    B, n, _ = contour_integral(A, gamma, lambda R, z: R @ Pp @ R, tol)
    P = riesz_projection(A, gamma, tol).matrix
    return CommutatorResult(B, P, norm2(B @ A - A @ B - comm(Pp, P)), n)


def sylvester_commutator(A, P, C) -> np.ndarray:
    """Oracle: the P-off-diagonal X with X A - A X = C, block by block via Sylvester solves."""
    A, P, C = as_matrix(A), as_matrix(P), as_matrix(C)
    d = A.shape[0]
    U1, s1, _ = np.linalg.svd(P)
    r = int(np.rint(np.trace(P).real))
    U2, _, _ = np.linalg.svd(np.eye(d) - P)
    T = np.hstack([U1[:, :r], U2[:, : d - r]])
    Ti = np.linalg.inv(T)
    At, Ct = Ti @ A @ T, Ti @ C @ T
    A11, A22 = At[:r, :r], At[r:, r:]
    X = np.zeros((d, d), dtype=np.complex128)
    # X12 A22 - A11 X12 = C12 and X21 A11 - A22 X21 = C21
    X[:r, r:] = sla.solve_sylvester(-A11, A22, Ct[:r, r:])
    X[r:, :r] = sla.solve_sylvester(-A22, A11, Ct[r:, :r])
    return T @ X @ Ti


# mollified derivative and approximate commutator ---------------------------------------
_BUMP_MASS = sint.quad(lambda x: np.exp(-1.0 / (1.0 - x * x)), -1, 1, epsabs=0, epsrel=1e-13, limit=200)[0]


def bump(x) -> np.ndarray:
    """Normalised exp(-1/(1-x^2)) on (-1, 1)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2)) / _BUMP_MASS
    return out


def mollified_Pprime(P_curve: ProjectionCurve, n: int, t: float, tol: float = 1e-12) -> np.ndarray:
    """Q_n(t) = int_0^1 J_{1/n}(t - r) P'(r) dr with J_h(x) = J(x/h)/h."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = max(0.0, t - 1.0 / n), min(1.0, t + 1.0 / n)
    if hi <= lo:
        d = P_curve(0.0).shape[-1]
        return np.zeros((d, d), dtype=np.complex128)

    def integrand(r):
        return n * bump(n * (t - r)) * P_curve.derivative([r])[0]

    val, _ = sint.quad_vec(integrand, lo, hi, epsabs=tol, epsrel=tol, limit=400)
    return val


@dataclass
class ApproxCommutator:
    B: np.ndarray
    C: np.ndarray
    C_plus: np.ndarray
    C_minus: np.ndarray
    residual: float  # ||B A - A B + C - [Q, P]||
    resolvent_norms: list


def approx_commutator_B(A, P, lam: complex, Q, deltas, theta: float = 0.0, m0: Optional[int] = None) -> ApproxCommutator:
    """B_{n,delta} and the remainder C = C+ - C- for the no-gap approximate commutator equation."""
    A = as_matrix(A)
    d = A.shape[0]
    P = as_matrix(P.matrix if hasattr(P, "matrix") else P, d)
    Q = as_matrix(Q, d)
    deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
    m0 = len(deltas) if m0 is None else m0
    if len(deltas) == 1 and m0 > 1:
        deltas = np.repeat(deltas, m0)
    if len(deltas) != m0:
        raise ValueError("need one delta per nilpotency level")
    I = np.eye(d)
    Pbar = I - P
    ph = np.exp(1j * theta)
    Rbar = []
    for dl in deltas:
        M = (lam + dl * ph) * I - A
        smin = np.linalg.svd(M, compute_uv=False)[-1]
        if smin <= 1e-13 * max(1.0, norm2(A)):
            raise RayViolationError(f"lambda + delta e^(i theta) hits the spectrum at delta={dl}", dl, float(smin))
        Rbar.append(np.linalg.solve(M, Pbar))
    N = lam * I - A
    B = np.zeros((d, d), dtype=np.complex128)
    Cp = np.zeros_like(B)
    Cm = np.zeros_like(B)
    prod = I
    Nk = I
    for k in range(m0):
        prod = prod @ Rbar[k]
        left = prod @ Q @ Nk @ P
        right = Nk @ P @ Q @ prod
        B += left + right
        Cp += deltas[k] * ph * left
        Cm += deltas[k] * ph * right
        Nk = Nk @ N
    C = Cp - Cm
    res = norm2(B @ A - A @ B + C - comm(Q, P))
    return ApproxCommutator(B, C, Cp, Cm, res, [norm2(R) for R in Rbar])


# defects ---------------------------------------------------------------------------
def _same_eps(U: Propagator, V: Propagator):
    if U.epsilon != V.epsilon:
        raise UsageError(f"propagators have different epsilon ({U.epsilon} vs {V.epsilon})")


def _on_grid(U: Propagator, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float) if grid is not None else U.grid
    return U.from_points(0.0, grid)


def adiabatic_defect(U_eps: Propagator, V_eps: Propagator, grid=None) -> float:
    """sup_t ||U(t,0) - V(t,0)|| over the grid."""
    _same_eps(U_eps, V_eps)
    return float(np.max(norm2(_on_grid(U_eps, grid) - _on_grid(V_eps, grid))))


def offdiag_defect(U_eps: Propagator, P_curve: ProjectionCurve, grid=None):
    """(sup ||(1-P(t)) U(t,0) P(0)||, sup ||P(t) U(t,0) (1-P(0))||)."""
    grid = U_eps.grid if grid is None else np.asarray(grid, dtype=float)
    Us = _on_grid(U_eps, grid)
    P = P_curve.value(grid)
    P0 = P_curve.value([0.0])[0]
    I = np.eye(P0.shape[0])
    a = norm2((I - P) @ Us @ P0)
    b = norm2(P @ Us @ (I - P0))
    return float(np.max(a)), float(np.max(b))


def intertwining_defect(V_eps: Propagator, P_curve: ProjectionCurve, grid=None) -> float:
    """sup_t ||P(t) V(t,0) - V(t,0) P(0)||."""
    grid = V_eps.grid if grid is None else np.asarray(grid, dtype=float)
    Vs = _on_grid(V_eps, grid)
    P = P_curve.value(grid)
    P0 = P_curve.value([0.0])[0]
    return float(np.max(norm2(P @ Vs - Vs @ P0)))


# rate fits ------------------------------------------------------------------------------
@dataclass
class FitRecord:
    model: str
    slope_or_g: float
    intercept: float
    r_squared: float
    used: list
    excluded: list

    def to_dict(self) -> dict:
        return {"model": self.model, "slope_or_g": self.slope_or_g, "intercept": self.intercept,
                "r_squared": self.r_squared, "used": [list(u) for u in self.used],
                "excluded": [list(e) for e in self.excluded]}


def fit_rate(sweep, model: str = "power", floor: float = 0.0, min_samples: int = 4) -> FitRecord:
    """Least-squares rate fit.  power: slope of log d vs log eps.  exponential: g = -slope of log d vs 1/eps."""
    if model not in ("power", "exponential"):
        raise ValueError("model must be 'power' or 'exponential'")
    used, excluded = [], []
    for eps, dfc in sweep:
        if not np.isfinite(dfc) or dfc <= 0:
            excluded.append((eps, dfc, "nonpositive"))
        elif dfc <= FLOOR_FACTOR * floor:
            excluded.append((eps, dfc, "below_floor"))
        else:
            used.append((eps, dfc))
    if len(used) < min_samples:
        raise UnderdeterminedFitError(f"only {len(used)} samples above 10x floor ({floor:.1e}); need {min_samples}")
    e = np.array([u[0] for u in used])
    y = np.log(np.array([u[1] for u in used]))
    x = np.log(e) if model == "power" else 1.0 / e
    slope, icpt = np.polyfit(x, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - (slope * x + icpt)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    val = float(slope) if model == "power" else float(-slope)
    return FitRecord(model, val, float(icpt), r2, used, excluded)


@dataclass
class SweepResult:
    scenario_id: str
    defect_kind: str
    samples: list  # (epsilon, sup_defect)
    fit: Optional[FitRecord]
    integrator_floor: float
    floors: list = field(default_factory=list)  # per-sample floor
    harness: str = ""
    note: str = ""

    def __post_init__(self):
        eps = [s[0] for s in self.samples]
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("sweep epsilons must be strictly decreasing")
        if any(s[1] < 0 for s in self.samples):
            raise ValueError("defects must be nonnegative")

    @property
    def defects(self) -> np.ndarray:
        return np.array([s[1] for s in self.samples])

    def monotone_decrease(self, factor: float = 1.2) -> bool:
        d = self.defects
        return bool(np.all(d[1:] <= factor * d[:-1]))

    def final_ratio(self) -> float:
        d = self.defects
        return float(d[-1] / d[0]) if d[0] > 0 else 0.0

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "harness": self.harness, "defect_kind": self.defect_kind,
                "samples": [list(s) for s in self.samples], "floors": list(self.floors),
                "fit": self.fit.to_dict() if self.fit else None,
                "integrator_floor": self.integrator_floor, "note": self.note}


def make_sweep(scenario_id, kind, samples, floors, model="power", harness="", fit=True) -> SweepResult:
    floor = max(floors) if floors else 0.0
    rec, note = None, ""
    if fit:
        try:
            # each sample is judged against its own floor
            rec = fit_rate([(e, d if d > FLOOR_FACTOR * f else 0.0) for (e, d), f in zip(samples, floors)], model, 0.0)
            rec.excluded = [(e, d, "below_floor" if d > 0 else "nonpositive")
                            for (e, d), f in zip(samples, floors) if not d > FLOOR_FACTOR * f or d <= 0]
        except UnderdeterminedFitError as exc:
            note = str(exc)
    return SweepResult(scenario_id, kind, [tuple(map(float, s)) for s in samples], rec, floor,
                       [float(f) for f in floors], harness, note)


# generators ---------------------------------------------------------------------------------
def kato_generator_fn(scenario: SpectralScenario):
    return scenario.kato


def adiabatic_generator(scenario: SpectralScenario, eps: float):
    """eps * [(1/eps) A + [P', P]], to be propagated with scale 1/eps."""
    A = scenario.family.eval_many

    def gen(ts):
        return A(ts) + eps * scenario.kato(ts)

    return gen


def nogap_generator(scenario: SpectralScenario, eps: float):
    """eps * [(1/eps) A P + [P', P]]."""
    A = scenario.family.eval_many
    Pc = scenario.projection_curve

    def gen(ts):
        return A(ts) @ Pc.value(ts) + eps * scenario.kato(ts)

    return gen


# harnesses -------------------------------------------------------------------------------------
@dataclass
class HarnessResult:
    scenario_id: str
    harness: str
    sweeps: dict
    invariants: dict
    timings: dict
    tolerances: dict  # epsilon -> tolerance actually used
    seed: Optional[int] = None
    failures: dict = field(default_factory=dict)  # epsilon -> error message

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "harness": self.harness,
                "sweeps": {k: v.to_dict() for k, v in self.sweeps.items()},
                "invariants": self.invariants, "timings": self.timings,
                "tolerances": {repr(k): v for k, v in self.tolerances.items()}, "seed": self.seed,
                "failures": {repr(k): v for k, v in self.failures.items()}}


def _check_eps_list(eps_list) -> list:
    eps = [float(e) for e in eps_list]
    if not eps:
        raise ValueError("empty epsilon list")
    if any(not 0 < e < 1 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be strictly decreasing in (0, 1)")
    return eps


def tightened(measure: Callable[[float], dict], tol: float, tighten: bool = True, margin: float = 100.0):
    """Run measure(tol) and tighten tol until it sits ``margin`` below every measured defect."""
    out = measure(tol)
    while tighten and tol > TOL_MIN:
        small = min(out["defects"].values())
        if small >= margin * tol:
            break
        new_tol = max(TOL_MIN, small / (10 * margin))
        if new_tol >= tol:
            break
        tol = new_tol
        out = measure(tol)
    out["tol"] = tol
    return out


def gap_harness(scenario: SpectralScenario, epsilon_list=None, grid_points: int = 65, tol: float = 1e-11,
                scheme: str = "magnus6", tighten: bool = True) -> HarnessResult:
    """U_eps vs V_eps (generator (1/eps) A + [P',P]) and the off-diagonal defects of U_eps."""
    eps_list = _check_eps_list(epsilon_list if epsilon_list is not None else scenario.default_epsilons)
    grid = np.linspace(0.0, 1.0, grid_points)
    fam = scenario.family
    P = scenario.projection_curve
    t0 = time.perf_counter()
    rows, inter, tols, fails = {}, {}, {}, {}
    for eps in eps_list:
        def measure(tl, eps=eps):
            U = build_propagator(fam, eps, grid, tl, scheme, generator_id=scenario.name)
            V = build_propagator(adiabatic_generator(scenario, eps), eps, grid, tl, scheme,
                                 generator_id=scenario.name + "+kato")
            o1, o2 = offdiag_defect(U, P, grid)
            return {"defects": {"UV": adiabatic_defect(U, V, grid), "offdiag_1": o1, "offdiag_2": o2},
                    "intertwining": intertwining_defect(V, P, grid),
                    "err": max(U.error_estimate, V.error_estimate)}
        try:
            out = tightened(measure, tol, tighten)
        except Exception as exc:  # captured per epsilon
            fails[eps] = f"{type(exc).__name__}: {exc}"
            continue
        rows[eps] = out
        tols[eps] = out["tol"]
        inter[eps] = out["intertwining"]
    done = [e for e in eps_list if e in rows]
    sweeps = {}
    for kind in ("UV", "offdiag_1", "offdiag_2"):
        samples = [(e, rows[e]["defects"][kind]) for e in done]
        floors = [FLOOR_FACTOR * tols[e] for e in done]
        sweeps[kind] = make_sweep(scenario.name, kind, samples, floors, "power", "gap")
    ppp = float(np.max(norm2(_ppp(P, grid))))
    invariants = {"intertwining": {repr(e): inter[e] for e in done},
                  "intertwining_bound": {repr(e): 20 * tols[e] for e in done},
                  "ppp_defect": ppp}
    return HarnessResult(scenario.name, "gap", sweeps, invariants,
                         {"total_s": time.perf_counter() - t0}, tols, failures=fails)


def _ppp(P_curve: ProjectionCurve, grid) -> np.ndarray:
    Pv = P_curve.value(grid)
    Pd = P_curve.derivative(grid)
    return Pv @ Pd @ Pv


def bornemann_defect(U: Propagator, P_curve: ProjectionCurve, xs: np.ndarray, grid=None, gram=None) -> float:
    """max over x and grid t of |<U x, P(t) U x> - <x, P(0) x>| (inner product given by ``gram``)."""
    grid = U.grid if grid is None else np.asarray(grid, dtype=float)
    Us = _on_grid(U, grid)
    P = P_curve.value(grid)
    P0 = P_curve.value([0.0])[0]
    G = np.eye(U.dim) if gram is None else gram
    worst = 0.0
    for x in xs:
        y = Us @ x  # (T, d)
        lhs = np.einsum("ti,ij,tj->t", y.conj(), G, np.einsum("tij,tj->ti", P, y))
        rhs = x.conj() @ G @ P0 @ x
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def unit_vectors(dim: int, count: int, seed: int, gram=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(count, dim)) + 1j * rng.normal(size=(count, dim))
    G = np.eye(dim) if gram is None else gram
    return np.array([x / np.sqrt((x.conj() @ G @ x).real) for x in xs])


def nogap_harness(scenario: SpectralScenario, epsilon_list=None, grid_points: int = 65, tol: float = 1e-11,
                  scheme: str = "magnus6", tighten: bool = True, seed: int = 1234, n_vectors: int = 5,
                  gram=None, with_V: bool = True) -> HarnessResult:
    """U_eps vs V0_eps (generator (1/eps) A P + [P',P]) without any gap assumption."""
    eps_list = _check_eps_list(epsilon_list if epsilon_list is not None else scenario.default_epsilons)
    grid = np.linspace(0.0, 1.0, grid_points)
    fam = scenario.family
    Pc = scenario.projection_curve
    P0 = Pc.value([0.0])[0]
    Pg = Pc.value(grid)
    G = np.eye(scenario.dim) if gram is None else np.asarray(gram)
    # operator norms in the inner product defined by G
    L = np.linalg.cholesky(G)
    Li = np.linalg.inv(L)

    def hnorm(X):
        return norm2(dagger(L) @ X @ dagger(Li))

    xs = unit_vectors(scenario.dim, n_vectors, seed, G)
    t0 = time.perf_counter()
    rows, tols, fails, v0b = {}, {}, {}, {}
    c_const = max(float(np.max(hnorm(Pg))), float(np.max(hnorm(Pc.derivative(grid)))))
    for eps in eps_list:
        def measure(tl, eps=eps):
            U = build_propagator(fam, eps, grid, tl, scheme, generator_id=scenario.name)
            V0 = build_propagator(nogap_generator(scenario, eps), eps, grid, tl, scheme,
                                  generator_id=scenario.name + "+AP+kato")
            Us, V0s = U.from_start, V0.from_start
            I = np.eye(scenario.dim)
            dfc = {"UV0_P0": float(np.max(hnorm((Us - V0s) @ P0))),
                   "P_UV0": float(np.max(hnorm(Pg @ (Us - V0s)))),
                   "offdiag_1": float(np.max(hnorm((I - Pg) @ Us @ P0))),
                   "offdiag_2": float(np.max(hnorm(Pg @ Us @ (I - P0))))}
            extra = {"bornemann": bornemann_defect(U, Pc, xs, grid, G),
                     "v0_bound": float(np.max(hnorm(V0s @ P0) / (scenario.M_bound * c_const * np.exp(scenario.M_bound * c_const * grid))))}
            if with_V:
                V = build_propagator(adiabatic_generator(scenario, eps), eps, grid, tl, scheme)
                dfc["UV"] = float(np.max(hnorm(Us - V.from_start)))
                extra["intertwining"] = intertwining_defect(V, Pc, grid)
            return {"defects": dfc, **extra}
        try:
            out = tightened(measure, tol, tighten)
        except Exception as exc:
            fails[eps] = f"{type(exc).__name__}: {exc}"
            continue
        rows[eps] = out
        tols[eps] = out["tol"]
    done = [e for e in eps_list if e in rows]
    kinds = ["UV0_P0", "P_UV0", "offdiag_1", "offdiag_2"] + (["UV"] if with_V else [])
    sweeps = {}
    for kind in kinds:
        samples = [(e, rows[e]["defects"][kind]) for e in done]
        floors = [FLOOR_FACTOR * tols[e] for e in done]
        sweeps[kind] = make_sweep(scenario.name, kind, samples, floors, "power", "nogap")
    samples = [(e, rows[e]["bornemann"]) for e in done]
    sweeps["bornemann"] = make_sweep(scenario.name, "bornemann", samples,
                                     [FLOOR_FACTOR * tols[e] for e in done], "power", "nogap")
    invariants = {"v0_bound_ratio": {repr(e): rows[e]["v0_bound"] for e in done},
                  "ppp_defect": float(np.max(norm2(_ppp(Pc, grid))))}
    if with_V:
        invariants["intertwining"] = {repr(e): rows[e]["intertwining"] for e in done}
        invariants["intertwining_bound"] = {repr(e): 20 * tols[e] for e in done}
    return HarnessResult(scenario.name, "nogap", sweeps, invariants,
                         {"total_s": time.perf_counter() - t0}, tols, seed, fails)


# partial integration identity -------------------------------------------------------------
def commutator_B_batch(scenario: SpectralScenario, ts, nodes: int = 64) -> np.ndarray:
    """B(t) = (1/2 pi i) \\oint R P' R dz on the scenario's circles, batched over t (fixed node count)."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    A = scenario.family.eval_many(ts)
    Pp = scenario.projection_curve.derivative(ts)
    lam = scenario.lam(ts)
    r = scenario.contour_radius
    d = A.shape[-1]
    e = np.exp(2j * np.pi * np.arange(nodes) / nodes)
    z = lam[:, None] + r * e[None, :]
    R = np.linalg.solve(z[..., None, None] * np.eye(d) - A[:, None], np.broadcast_to(np.eye(d), z.shape + (d, d)))
    w = r * e / nodes
    return np.einsum("k,tkij->tij", w, R @ Pp[:, None] @ R)


def partial_integration_check(scenario: SpectralScenario, eps: float, grid_points: int = 33,
                              tol: float = 1e-11, h: float = 1e-3) -> dict:
    """Both sides of V - U = eps [U(t,s) B(s) V(s)]_0^t - eps int_0^t U(t,s)(B' + B [P',P]) V ds.

    The integral is the off-diagonal block of the propagator of
    [[A/eps, F], [0, A/eps + K]], which equals int_0^t U(t,s) F(s) V(s,0) ds exactly.
    """
    grid = np.linspace(0.0, 1.0, grid_points)
    fam = scenario.family
    d = scenario.dim

    def Bp(ts):
        out = []
        for t in np.atleast_1d(ts):
            offs, w = fd_stencil(float(t), 1, h)
            out.append(np.tensordot(w, commutator_B_batch(scenario, t + offs * h), axes=(0, 0)))
        return np.stack(out)

    def F(ts):
        return Bp(ts) + commutator_B_batch(scenario, ts) @ scenario.kato(ts)

    def block(ts):
        A = fam.eval_many(ts)
        out = np.zeros((len(ts), 2 * d, 2 * d), dtype=np.complex128)
        out[:, :d, :d] = A
        out[:, :d, d:] = eps * F(ts)
        out[:, d:, d:] = A + eps * scenario.kato(ts)
        return out

    W = build_propagator(block, eps, grid, tol, generator_id="partial-integration block")
    Us = W.from_start[:, :d, :d]
    Vs = W.from_start[:, d:, d:]
    Int = W.from_start[:, :d, d:]
    Bg = commutator_B_batch(scenario, grid)
    lhs = Vs - Us
    rhs = eps * (Bg @ Vs - Us @ Bg[0]) - eps * Int
    return {"defect": float(np.max(norm2(lhs - rhs))), "lhs_size": float(np.max(norm2(lhs))),
            "integration_error": W.error_estimate}
