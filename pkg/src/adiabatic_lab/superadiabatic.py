"""Superadiabatic iteration A_k = A - eps K_{k-1}, P_k = Riesz(A_k), K_k = [P_k', P_k].

Two ways of producing P_k':

* ``jet``: for analytic families.  Taylor coefficients of A at Chebyshev-Lobatto
  nodes are pushed through the iteration (resolvent and product of truncated
  power series), so every level is differentiated exactly as a series; one order
  is lost per level.  Values off the nodes come from barycentric interpolation.
* ``fd4``: for finitely smooth families.  Values on a uniform grid, order-4
  finite differences, cubic-spline interpolation.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from ._linalg import comm, norm2
from .adiabatic import (FLOOR_FACTOR, HarnessResult, SpectralScenario, make_sweep, tightened, _check_eps_list)
from .errors import CapabilityError, ContourError
from .evolution import build_propagator
from .operator_family import fd_stencil, taylor_jets
from .spectral import riesz_projection_batch

MAX_LEVELS = 12


# interpolation ------------------------------------------------------------------
def chebyshev_nodes(n: int) -> np.ndarray:
    """n + 1 Chebyshev-Lobatto points on [0, 1], increasing."""
    return (1 - np.cos(np.pi * np.arange(n + 1) / n)) / 2


class ChebInterp:
    """Barycentric interpolation of matrix values given at Chebyshev-Lobatto points."""

    def __init__(self, nodes, values):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values)
        n = len(self.nodes) - 1
        w = (-1.0) ** np.arange(n + 1)
        w[0] *= 0.5
        w[-1] *= 0.5
        self.w = w

    def __call__(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        diff = ts[:, None] - self.nodes[None, :]
        exact = diff == 0
        diff[exact] = 1.0
        q = self.w / diff
        hit = exact.any(1)
        q[hit] = exact[hit].astype(float)
        q /= q.sum(1, keepdims=True)
        return np.einsum("tn,n...->t...", q, self.values)


class SplineInterp:
    def __init__(self, nodes, values):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values)
        self._s = CubicSpline(self.nodes, self.values, axis=0)

    def __call__(self, ts) -> np.ndarray:
        return self._s(np.atleast_1d(np.asarray(ts, dtype=float)))


class ZeroCurve:
    def __init__(self, dim):
        self.dim = dim

    def __call__(self, ts):
        return np.zeros((len(np.atleast_1d(ts)), self.dim, self.dim), dtype=np.complex128)


# truncated power series of matrices -------------------------------------------------
def jet_mul(X, Y):
    """Cauchy product of matrix series along axis -3, truncated to the shorter length."""
    L = min(X.shape[-3], Y.shape[-3])
    out = np.zeros(X.shape[:-3] + (L,) + X.shape[-2:], dtype=np.complex128)
    for j in range(L):
        for i in range(j + 1):
            out[..., j, :, :] += X[..., i, :, :] @ Y[..., j - i, :, :]
    return out


def jet_inv(X):
    """Series inverse: Y0 = X0^{-1}, Yj = -Y0 sum_{i=1..j} Xi Y_{j-i}."""
    L = X.shape[-3]
    Y = np.zeros_like(X)
    Y0 = np.linalg.inv(X[..., 0, :, :])
    Y[..., 0, :, :] = Y0
    for j in range(1, L):
        s = 0
        for i in range(1, j + 1):
            s = s + X[..., i, :, :] @ Y[..., j - i, :, :]
        Y[..., j, :, :] = -Y0 @ s
    return Y


def jet_deriv(X):
    L = X.shape[-3]
    return X[..., 1:, :, :] * np.arange(1, L)[:, None, None]


def riesz_jet(Aj, centers, radius, nz: int = 64):
    """Series of the Riesz projection of a matrix series, on circles; returns (P jets, half-rule error)."""
    T, L, d, _ = Aj.shape
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (T,))
    e = np.exp(2j * np.pi * np.arange(nz) / nz)
    z = centers[:, None] + radius[:, None] * e[None, :]
    Zj = -np.broadcast_to(Aj[:, None], (T, nz, L, d, d)).copy()
    Zj[:, :, 0] += z[..., None, None] * np.eye(d)
    R = jet_inv(Zj)
    w = radius[:, None] * e[None, :] / nz
    P = np.einsum("tz,tzlab->tlab", w, R)
    Ph = np.einsum("tz,tzab->tab", 2 * w[:, ::2], R[:, ::2, 0])
    return P, float(np.max(norm2(P[:, 0] - Ph)))


# iteration ------------------------------------------------------------------------
@dataclass
class IterationState:
    level: int
    epsilon: float
    nodes: np.ndarray
    well_defined: bool
    contour_margin: float
    A_nodes: np.ndarray
    P_nodes: Optional[np.ndarray] = None
    K_nodes: Optional[np.ndarray] = None
    diff_norm: float = float("nan")  # sup ||K_k - K_{k-1}|| on the nodes (K_{-1} = 0)
    idempotency_defect: float = float("nan")
    commutation_defect: float = float("nan")
    quadrature_error: float = float("nan")
    K_jet_norms: Optional[np.ndarray] = None  # sup_t ||K_k^{(l)}/l!|| (jet method)
    K_prev: Optional[Callable] = None
    K_curve: Optional[Callable] = None
    _scenario: Optional[SpectralScenario] = field(default=None, repr=False)
    _radius: float = 0.0

    def A_k_curve(self, ts) -> np.ndarray:
        return self._scenario.family.eval_many(ts) - self.epsilon * self.K_prev(ts)

    def K_k_curve(self, ts) -> np.ndarray:
        return self.K_curve(ts)

    def P_k_curve(self, ts) -> np.ndarray:
        """Riesz projection of A_k(t) evaluated directly at ``ts``."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        P, _, _ = riesz_projection_batch(self.A_k_curve(ts), self._scenario.lam(ts), self._radius, 64)
        return P


def _contour_data(scenario: SpectralScenario, contours, ts):
    if contours is None:
        if scenario.contour_radius is None:
            raise CapabilityError(f"{scenario.name} has no contour radius")
        return scenario.lam(ts), np.full(len(ts), float(scenario.contour_radius))
    if np.isscalar(contours):
        return scenario.lam(ts), np.full(len(ts), float(contours))
    c, r = contours(ts)
    return np.asarray(c, dtype=np.complex128), np.broadcast_to(np.asarray(r, dtype=float), (len(ts),)).copy()


def _margin(As, centers, radii, rank):
    ev = np.linalg.eigvals(As)
    dist = np.abs(ev - centers[:, None])
    margin = float(np.min(np.abs(dist - radii[:, None])))
    inside = (dist < radii[:, None]).sum(1)
    return margin if np.all(inside == rank) else -margin


def choose_method(scenario: SpectralScenario, method: str = "auto") -> str:
    if method == "auto":
        return "jet" if scenario.family.analytic_extension is not None else "fd4"
    if method == "jet" and scenario.family.analytic_extension is None:
        raise CapabilityError("the jet method needs an analytic extension")
    if method not in ("jet", "fd4"):
        raise ValueError(f"unknown method {method!r}")
    return method


def iterate(scenario: SpectralScenario, contours=None, epsilon: float = 0.01, levels: int = 3,
            method: str = "auto", n_nodes: Optional[int] = None, jet_radius: float = 0.1,
            contour_nodes: int = 64) -> list:
    """States 0..levels of the iteration; stops at the first level whose contour meets the spectrum."""
    if scenario.gap_class != "uniform":
        raise CapabilityError(f"{scenario.name}: the iteration needs a uniform gap (gap_class={scenario.gap_class})")
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    method = choose_method(scenario, method)
    fam = scenario.family
    d = fam.dim
    if method == "jet":
        nodes = chebyshev_nodes(n_nodes or 96)
        interp = ChebInterp
    else:
        nodes = np.linspace(0.0, 1.0, n_nodes or 401)
        interp = SplineInterp
    centers, radii = _contour_data(scenario, contours, nodes)
    P0 = scenario.projection_curve.value(nodes[:1])[0]
    rank = int(np.rint(np.trace(P0).real))
    states = []
    K_prev_nodes = np.zeros((len(nodes), d, d), dtype=np.complex128)
    K_prev = ZeroCurve(d)
    if method == "jet":
        L = levels + 1
        Aj0 = taylor_jets(fam, nodes, L, radius=jet_radius)
        Aj = Aj0
    else:
        A0 = fam.eval_many(nodes)
        Ak = A0
        h = nodes[1] - nodes[0]
        stencils = [fd_stencil(float(t), 1, h) for t in nodes]
    for k in range(levels + 1):
        A_vals = Aj[:, 0] if method == "jet" else Ak
        margin = _margin(A_vals, centers, radii, rank)
        common = dict(level=k, epsilon=epsilon, nodes=nodes, A_nodes=A_vals, K_prev=K_prev,
                      _scenario=scenario, _radius=float(np.max(radii)))
        if margin <= 0:
            states.append(IterationState(well_defined=False, contour_margin=margin, **common))
            break
        jet_norms = None
        if method == "jet":
            Pj, qerr = riesz_jet(Aj, centers, radii, contour_nodes)
            Pd = jet_deriv(Pj)
            Pl = Pj[:, :-1]
            Kj = jet_mul(Pd, Pl) - jet_mul(Pl, Pd)
            P, K = Pj[:, 0], Kj[:, 0]
            jet_norms = np.max(norm2(Kj), axis=0)
        else:
            try:
                P, _, _ = riesz_projection_batch(Ak, centers, radii, 32)
            except ContourError:
                states.append(IterationState(well_defined=False, contour_margin=0.0, **common))
                break
            qerr = 0.0
            idx = np.arange(len(nodes))
            Pd = np.stack([np.tensordot(w, P[i + offs], axes=(0, 0)) for i, (offs, w) in zip(idx, stencils)])
            K = Pd @ P - P @ Pd
        K_curve = interp(nodes, K)
        states.append(IterationState(
            well_defined=True, contour_margin=margin, P_nodes=P, K_nodes=K,
            diff_norm=float(np.max(norm2(K - K_prev_nodes))),
            idempotency_defect=float(np.max(norm2(P @ P - P))),
            commutation_defect=float(np.max(norm2(comm(P, A_vals)))),
            quadrature_error=qerr, K_jet_norms=jet_norms, K_curve=K_curve, **common))
        K_prev_nodes, K_prev = K, K_curve
        if method == "jet":
            Aj = Aj0[:, : Kj.shape[1]] - epsilon * Kj
        else:
            Ak = A0 - epsilon * K
    return states


# constants and optimal truncation --------------------------------------------------------
def n_star(epsilon: float, c: float, d: float) -> int:
    """floor(1 / (e c d eps))."""
    if epsilon <= 0 or c <= 0 or d <= 0:
        raise ValueError("epsilon, c and d must be positive")
    x = 1.0 / (math.e * c * d * epsilon)
    return int(math.floor(x * (1 + 1e-12)))


@dataclass
class Constants:
    a: float  # sup of ||(z - A(t))^{-1}|| over the contours
    b: float  # prefactor of the derivative bound on [P', P]
    c: float  # growth rate of the derivatives of [P', P]
    cd: Optional[float] = None
    d: Optional[float] = None
    fit_levels: int = 0


def measure_constants(scenario: SpectralScenario, contours=None, orders: int = 10, n_nodes: int = 96,
                      jet_radius: float = 0.1) -> Constants:
    """a from the contours, (b, c) from ||d^l [P', P]|| (1 + l)^2 / l! ~ b c^l."""
    nodes = chebyshev_nodes(n_nodes)
    centers, radii = _contour_data(scenario, contours, nodes)
    A = scenario.family.eval_many(nodes)
    d = scenario.dim
    e = np.exp(2j * np.pi * np.arange(64) / 64)
    z = centers[:, None] + radii[:, None] * e[None, :]
    smin = np.linalg.svd(z[..., None, None] * np.eye(d) - A[:, None], compute_uv=False)[..., -1]
    a = float(1.0 / np.min(smin))
    if scenario.family.analytic_extension is None:
        K = scenario.kato(nodes)
        return Constants(a, float(np.max(norm2(K))), float("nan"))
    Aj = taylor_jets(scenario.family, nodes, orders + 1, radius=jet_radius)
    Pj, _ = riesz_jet(Aj, centers, radii)
    Pd = jet_deriv(Pj)
    Kj = jet_mul(Pd, Pj[:, :-1]) - jet_mul(Pj[:, :-1], Pd)
    norms = np.max(norm2(Kj), axis=0)  # sup_t ||K^{(l)}|| / l!
    ls = np.arange(len(norms))
    y = np.log(np.maximum(norms, 1e-300) * (1 + ls) ** 2)
    slope, icpt = np.polyfit(ls, y, 1)
    c = float(np.exp(slope))
    # b: smallest prefactor making the bound hold for every measured order
    b = float(np.max(norms * (1 + ls) ** 2 / c**ls))
    return Constants(a, b, c)


def fit_cd(diffs: dict, max_level: int = 6) -> tuple:
    """Joint fit log(dK_k / k!) = beta0 + k log(cd) + k log eps over levels 1..max_level and all eps.

    ``diffs`` maps eps -> list of sup||K_k - K_{k-1}|| for k = 0, 1, ...
    Returns (cd, beta0, r2).
    """
    xs, ys = [], []
    for eps, dk in diffs.items():
        for k in range(1, min(max_level, len(dk) - 1) + 1):
            if dk[k] > 0 and np.isfinite(dk[k]):
                xs.append(k)
                ys.append(math.log(dk[k] / math.factorial(k)) - k * math.log(eps))
    if len(set(xs)) < 2:
        raise ValueError("not enough levels to fit c d")
    slope, icpt = np.polyfit(xs, ys, 1)
    pred = slope * np.asarray(xs) + icpt
    ss = float(np.sum((np.asarray(ys) - np.mean(ys)) ** 2))
    r2 = 1 - float(np.sum((np.asarray(ys) - pred) ** 2)) / ss if ss > 0 else 1.0
    return float(np.exp(slope)), float(icpt), r2


@dataclass
class EpsilonStar:
    value: float
    bracket: tuple
    levels: int
    margin_floor: float
    constants: Constants
    hit_upper_bound: bool
    note: str = ("operational estimate: largest eps keeping every contour off the spectrum of A_k; "
                 "the closed-form threshold needs constants from an external reference")


def _well_defined(scenario, contours, eps, levels, margin_floor, **kw) -> bool:
    st = iterate(scenario, contours, eps, levels, **kw)
    return len(st) == levels + 1 and all(s.well_defined and s.contour_margin >= margin_floor for s in st)


def epsilon_star_estimate(scenario: SpectralScenario, contours=None, levels: int = 4, lo: float = 1e-3,
                          hi: float = 8.0, margin_floor: float = 1e-3, iters: int = 40, rel: float = 1e-3,
                          **kw) -> EpsilonStar:
    """Bisection (in log eps) for the largest eps at which the iteration stays well defined."""
    consts = measure_constants(scenario, contours)
    if _well_defined(scenario, contours, hi, levels, margin_floor, **kw):
        return EpsilonStar(hi, (hi, hi), levels, margin_floor, consts, True)
    if not _well_defined(scenario, contours, lo, levels, margin_floor, **kw):
        return EpsilonStar(0.0, (0.0, lo), levels, margin_floor, consts, False,
                           "iteration fails already at the lower search bound")
    a, b = lo, hi
    for _ in range(iters):
        if b / a < 1 + rel:
            break
        mid = math.sqrt(a * b)
        if _well_defined(scenario, contours, mid, levels, margin_floor, **kw):
            a = mid
        else:
            b = mid
    return EpsilonStar(a, (a, b), levels, margin_floor, consts, False)


# harness ---------------------------------------------------------------------------------------
def _states_to_level(scenario, contours, eps, n, method, **kw):
    st = iterate(scenario, contours, eps, n, method, **kw)
    if len(st) < n + 1 or not st[-1].well_defined:
        bad = st[-1].level
        raise ContourError(f"iteration not well defined at level {bad} for eps={eps}")
    return st


def superadiabatic_harness(scenario: SpectralScenario, epsilon_list=None, mode: str = "fixed_n", n: int = 2,
                           grid_points: int = 65, tol: float = 1e-11, method: str = "auto",
                           contours=None, cap: int = MAX_LEVELS, fit_levels: int = 6, tighten: bool = True,
                           scheme: str = "magnus6") -> HarnessResult:
    """Sweeps of sup||P_eps - P||, sup||U - V|| and the dressed off-diagonal defects.

    ``mode="fixed_n"`` uses level n for every eps (power fits); ``mode="optimal_truncation"``
    uses n*(eps) from measured c and d, capped at ``cap`` (exponential fits).
    """
    if scenario.gap_class != "uniform":
        raise CapabilityError(f"{scenario.name}: superadiabatic iteration needs a uniform gap")
    if mode not in ("fixed_n", "optimal_truncation"):
        raise ValueError("mode must be 'fixed_n' or 'optimal_truncation'")
    if mode == "optimal_truncation" and scenario.family.smoothness != "analytic":
        raise CapabilityError("optimal truncation needs an analytic family")
    eps_list = _check_eps_list(epsilon_list if epsilon_list is not None else scenario.default_epsilons)
    method = choose_method(scenario, method)
    grid = np.linspace(0.0, 1.0, grid_points)
    fam = scenario.family
    P = scenario.projection_curve
    d = scenario.dim
    I = np.eye(d)
    t0 = time.perf_counter()
    invariants: dict = {"mode": mode, "method": method}
    levels = {}
    fails = {}
    if mode == "fixed_n":
        if n < 0 or n > cap:
            raise ValueError(f"fixed level must lie in [0, {cap}]")
        levels = {e: n for e in eps_list}
    else:
        diffs = {}
        for e in eps_list:
            try:
                st = iterate(scenario, contours, e, fit_levels, method)
                diffs[e] = [s.diff_norm for s in st if s.well_defined]
            except Exception as exc:
                fails[e] = f"{type(exc).__name__}: {exc}"
        consts = measure_constants(scenario, contours)
        cd, beta0, r2 = fit_cd(diffs, fit_levels)
        consts.cd, consts.d, consts.fit_levels = cd, cd / consts.c, fit_levels
        levels = {e: min(cap, max(1, n_star(e, consts.c, consts.d))) for e in eps_list if e not in fails}
        invariants["constants"] = {"a": consts.a, "b": consts.b, "c": consts.c, "d": consts.d, "cd": cd,
                                   "cd_fit_r2": r2}
    invariants["levels"] = {repr(e): lv for e, lv in levels.items()}
    rows, tols, diff_table = {}, {}, {}
    P_grid = P.value(grid)
    for eps, lv in levels.items():
        try:
            st = _states_to_level(scenario, contours, eps, lv, method)
        except Exception as exc:
            fails[eps] = f"{type(exc).__name__}: {exc}"
            continue
        top = st[lv]
        K_n, K_m = top.K_curve, top.K_prev
        diff_table[repr(eps)] = [s.diff_norm for s in st]
        Pe = top.P_k_curve(grid)

        def vgen(ts, K_n=K_n, K_m=K_m):
            return fam.eval_many(ts) + eps * (K_n(ts) - K_m(ts))

        def measure(tl, eps=eps, Pe=Pe, vgen=vgen):
            U = build_propagator(fam, eps, grid, tl, scheme, generator_id=scenario.name)
            V = build_propagator(vgen, eps, grid, tl, scheme, generator_id=f"{scenario.name}+level{lv}")
            Us, Vs = U.from_start, V.from_start
            return {"defects": {"UV": float(np.max(norm2(Us - Vs))),
                                "offdiag_1": float(np.max(norm2((I - Pe) @ Us @ Pe[0]))),
                                "offdiag_2": float(np.max(norm2(Pe @ Us @ (I - Pe[0]))))},
                    "intertwining": float(np.max(norm2(Pe @ Vs - Vs @ Pe[0])))}

        try:
            out = tightened(measure, tol, tighten)
        except Exception as exc:
            fails[eps] = f"{type(exc).__name__}: {exc}"
            continue
        out["drift"] = float(np.max(norm2(Pe - P_grid)))
        out["states"] = {"idempotency": max(s.idempotency_defect for s in st),
                         "commutation": max(s.commutation_defect for s in st),
                         "quadrature": max(s.quadrature_error for s in st)}
        rows[eps] = out
        tols[eps] = out["tol"]
    done = [e for e in eps_list if e in rows]
    floors = [FLOOR_FACTOR * tols[e] for e in done]
    model = "power" if mode == "fixed_n" else "exponential"
    sweeps = {"projection_drift": make_sweep(scenario.name, "projection_drift",
                                             [(e, rows[e]["drift"]) for e in done], floors, "power",
                                             "superadiabatic", fit=not (mode == "fixed_n" and n == 0))}
    for kind in ("UV", "offdiag_1", "offdiag_2"):
        sweeps[kind] = make_sweep(scenario.name, kind, [(e, rows[e]["defects"][kind]) for e in done], floors,
                                  model, "superadiabatic")
    invariants["intertwining"] = {repr(e): rows[e]["intertwining"] for e in done}
    invariants["intertwining_bound"] = {repr(e): 20 * tols[e] for e in done}
    invariants["level_diffs"] = diff_table
    invariants["state_defects"] = {repr(e): rows[e]["states"] for e in done}
    return HarnessResult(scenario.name, "superadiabatic", sweeps, invariants,
                         {"total_s": time.perf_counter() - t0}, tols, failures=fails)
