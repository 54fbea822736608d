"""Riesz and weakly associated spectral projections of (non-normal) matrices."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from ._linalg import as_matrix, dagger, norm2
from .errors import ContourError, NearSingularityError, NotSpectralValueError, QuadratureError

EIG_TOL = 1e-8
RANK_TOL = 1e-10
MIN_NODES = 16
MAX_NODES = 4096


# contours -------------------------------------------------------------------
@dataclass(frozen=True)
class Contour:
    """Closed, positively oriented quadrature curve (circle or polygon)."""

    kind: str = "circle"
    center: complex = 0j
    radius: float = 1.0
    vertices: tuple = ()
    nodes: int = 32

    def __post_init__(self):
        if self.kind not in ("circle", "polygon"):
            raise ValueError(f"unknown contour kind {self.kind!r}")
        if self.nodes < MIN_NODES:
            raise ValueError(f"contour needs at least {MIN_NODES} nodes")
        if self.kind == "circle" and not self.radius > 0:
            raise ValueError("circle radius must be positive")
        if self.kind == "polygon" and len(self.vertices) < 3:
            raise ValueError("polygon needs at least three vertices")

    def quadrature(self, n: int, shift: bool = False):
        """Nodes z_k and weights w_k with sum_k w_k f(z_k) ~ (1/2 pi i) \\oint f dz.

        For circles ``shift`` returns the n interleaved nodes that, together with
        the unshifted ones, form the 2n-point rule (weights for the 2n rule).
        """
        if self.kind == "circle":
            k = np.arange(n) + (0.5 if shift else 0.0)
            e = np.exp(2j * np.pi * k / n)
            z = self.center + self.radius * e
            w = self.radius * e / n
            if shift:
                w = w / 2
            return z, w
        verts = np.asarray(self.vertices, dtype=np.complex128)
        edges = list(zip(verts, np.roll(verts, -1)))
        per = max(4, n // len(edges))
        x, gw = np.polynomial.legendre.leggauss(per)
        zs, ws = [], []
        for a, b in edges:
            zs.append((a + b) / 2 + (b - a) / 2 * x)
            ws.append(gw * (b - a) / 2 / (2j * np.pi))
        return np.concatenate(zs), np.concatenate(ws)

    def winding(self, pts) -> np.ndarray:
        pts = np.atleast_1d(np.asarray(pts, dtype=np.complex128))
        if self.kind == "circle":
            return (np.abs(pts - self.center) < self.radius).astype(int)
        verts = np.asarray(self.vertices, dtype=np.complex128)
        ang = np.zeros(len(pts))
        for a, b in zip(verts, np.roll(verts, -1)):
            ang += np.angle((b - pts) / (a - pts))
        return np.rint(ang / (2 * np.pi)).astype(int)

    def distance(self, pts) -> np.ndarray:
        pts = np.atleast_1d(np.asarray(pts, dtype=np.complex128))
        if self.kind == "circle":
            return np.abs(np.abs(pts - self.center) - self.radius)
        verts = np.asarray(self.vertices, dtype=np.complex128)
        best = np.full(len(pts), np.inf)
        for a, b in zip(verts, np.roll(verts, -1)):
            s = np.clip(((pts - a) * np.conj(b - a)).real / abs(b - a) ** 2, 0, 1)
            best = np.minimum(best, np.abs(pts - (a + s * (b - a))))
        return best


def circle(center: complex, radius: float, nodes: int = 32) -> Contour:
    return Contour("circle", complex(center), float(radius), (), nodes)


def polygon(vertices: Sequence[complex], nodes: int = 64) -> Contour:
    return Contour("polygon", 0j, 1.0, tuple(complex(v) for v in vertices), nodes)


# projections ------------------------------------------------------------------
@dataclass
class Projection:
    matrix: np.ndarray
    idempotency_defect: float
    rank: int
    order_m: Optional[int] = None
    trace_imag: float = 0.0
    nodes_used: int = 0
    quadrature_error: float = 0.0
    basis_condition: float = 1.0
    cross_check: Optional[float] = None  # distance to the other construction, if computed

    @classmethod
    def from_matrix(cls, P, **kw) -> "Projection":
        P = np.asarray(P, dtype=np.complex128)
        tr = np.trace(P)
        return cls(P, norm2(P @ P - P), int(np.rint(tr.real)), trace_imag=abs(tr.imag), **kw)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)


def _scale(A) -> float:
    return max(1.0, norm2(A))


def resolvent(A, z: complex, tol: float = 1e-12) -> np.ndarray:
    """(z - A)^{-1} by a direct solve; refuses z (numerically) in the spectrum."""
    A = as_matrix(A)
    M = z * np.eye(A.shape[0]) - A
    smin = np.linalg.svd(M, compute_uv=False)[-1]
    if smin <= tol * _scale(A):
        raise NearSingularityError(f"z={z} is within {smin:.2e} of the spectrum", residual=float(smin))
    R = np.linalg.solve(M, np.eye(A.shape[0]))
    res = norm2(M @ R - np.eye(A.shape[0]))
    if res > 1e3 * np.finfo(float).eps * np.linalg.cond(M):
        raise NearSingularityError(f"resolvent residual {res:.2e} too large", residual=float(res))
    return R


def contour_integral(A, gamma: Contour, integrand: Callable[[np.ndarray, np.ndarray], np.ndarray],
                     tol: float = 1e-12, max_nodes: int = MAX_NODES):
    """(1/2 pi i) \\oint integrand(R(z), z) dz with node doubling until successive rules agree.

    ``integrand`` receives a stack of resolvents (n, d, d) and the nodes (n,).
    Returns (value, nodes_used, last_difference).
    """
    A = as_matrix(A)
    d = A.shape[0]
    ev = np.linalg.eigvals(A)
    dist = gamma.distance(ev)
    if np.min(dist) <= 1e-10 * _scale(A):
        raise ContourError(f"contour passes within {np.min(dist):.2e} of the spectrum")

    def partial(z, w):
        R = np.linalg.solve(z[:, None, None] * np.eye(d) - A[None], np.broadcast_to(np.eye(d), (len(z), d, d)))
        return np.einsum("k,kij->ij", w, integrand(R, z))

    n = gamma.nodes
    val = partial(*gamma.quadrature(n))
    while True:
        if gamma.kind == "circle":
            z, w = gamma.quadrature(n, shift=True)
            new = val / 2 + partial(z, w)
        else:
            new = partial(*gamma.quadrature(2 * n))
        diff = norm2(new - val)
        n *= 2
        val = new
        if diff <= tol * max(1.0, norm2(val)):
            return val, n, diff
        if n >= max_nodes:
            raise QuadratureError(f"contour quadrature not converged at {n} nodes (last change {diff:.2e})")


def riesz_projection(A, gamma: Contour, tol: float = 1e-12) -> Projection:
    """Riesz projection (1/2 pi i) \\oint (z - A)^{-1} dz."""
    A = as_matrix(A)
    P, n, diff = contour_integral(A, gamma, lambda R, z: R, tol)
    proj = Projection.from_matrix(P, nodes_used=n, quadrature_error=diff)
    enclosed = int(np.sum(gamma.winding(np.linalg.eigvals(A))))
    if proj.rank != enclosed:
        raise QuadratureError(f"projection rank {proj.rank} differs from enclosed eigenvalue count {enclosed}")
    return proj


def riesz_projection_batch(As, centers, radius, nodes: int = 32, tol: float = 1e-12, max_nodes: int = MAX_NODES):
    """Riesz projections for a stack of matrices on circles; shared node count.

    Returns (P (n, d, d), nodes_used, min contour margin).
    """
    As = np.asarray(As, dtype=np.complex128)
    T, d, _ = As.shape
    centers = np.broadcast_to(np.asarray(centers, dtype=np.complex128), (T,))
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (T,))
    ev = np.linalg.eigvals(As)
    margin = float(np.min(np.abs(np.abs(ev - centers[:, None]) - radius[:, None])))
    if margin <= 1e-10:
        raise ContourError(f"a contour passes within {margin:.2e} of the spectrum")
    I = np.eye(d)

    def partial(n, shift):
        k = np.arange(n) + (0.5 if shift else 0.0)
        e = np.exp(2j * np.pi * k / n)
        z = centers[:, None] + radius[:, None] * e[None, :]
        R = np.linalg.solve(z[..., None, None] * I - As[:, None], np.broadcast_to(I, z.shape + (d, d)))
        w = radius[:, None] * e[None, :] / n / (2 if shift else 1)
        return np.einsum("tk,tkij->tij", w, R)

    n = nodes
    val = partial(n, False)
    while True:
        new = val / 2 + partial(n, True)
        diff = float(np.max(norm2(new - val)))
        n *= 2
        val = new
        if diff <= tol * max(1.0, float(np.max(norm2(val)))):
            return val, n, margin
        if n >= max_nodes:
            raise QuadratureError(f"batched contour quadrature not converged at {n} nodes")


def _nullity(M, rel=RANK_TOL) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0:
        return M.shape[0]
    return int(np.sum(s <= rel * s[0]))


def _ker_ran(M, rel=RANK_TOL):
    """Orthonormal bases of ker M and ran M."""
    U, s, Vh = np.linalg.svd(M)
    r = int(np.sum(s > rel * s[0])) if s[0] > 0 else 0
    return dagger(Vh)[:, r:], U[:, :r]


def check_spectral_value(A, lam: complex, tol: float = EIG_TOL) -> None:
    A = as_matrix(A)
    ev = np.linalg.eigvals(A)
    if np.min(np.abs(ev - lam)) <= tol * _scale(A):
        return
    smin = np.linalg.svd(A - lam * np.eye(A.shape[0]), compute_uv=False)[-1]
    if smin <= tol * _scale(A):
        return
    raise NotSpectralValueError(f"lambda={lam} is {np.min(np.abs(ev - lam)):.2e} away from every eigenvalue")


def nilpotency_order(A, lam: complex) -> int:
    """Smallest k >= 1 with ker (A-lam)^k = ker (A-lam)^(k+1)."""
    A = as_matrix(A)
    d = A.shape[0]
    N = A - lam * np.eye(d)
    Mk = N.copy()
    prev = _nullity(Mk)
    for k in range(1, d + 1):
        Mk1 = Mk @ N
        cur = _nullity(Mk1)
        if cur == prev:
            return k
        Mk, prev = Mk1, cur
    raise RuntimeError("nilpotency order exceeded the dimension; this cannot happen for a finite matrix")


def weakly_associated_projection(A, lam: complex, cross_check: bool = True) -> Projection:
    """P with ran P = ker (A-lam)^m and ker P = ran (A-lam)^m, m minimal."""
    A = as_matrix(A)
    d = A.shape[0]
    check_spectral_value(A, lam)
    m = nilpotency_order(A, lam)
    K, Rg = _ker_ran(np.linalg.matrix_power(A - lam * np.eye(d), m))
    if K.shape[1] + Rg.shape[1] != d:
        raise NotSpectralValueError("kernel and range of (A-lam)^m do not span the space")
    T = np.hstack([K, Rg])
    sel = np.zeros(d)
    sel[: K.shape[1]] = 1.0
    P = (T * sel) @ np.linalg.inv(T)
    proj = Projection.from_matrix(P, order_m=m, basis_condition=float(np.linalg.cond(T)))
    if cross_check:
        ev = np.linalg.eigvals(A)
        others = ev[np.abs(ev - lam) > 1e-6 * _scale(A)]
        r = 0.5 * np.min(np.abs(others - lam)) if len(others) else 1.0
        try:
            Pr = riesz_projection(A, circle(lam, r), tol=1e-13).matrix
            proj.cross_check = norm2(Pr - P)
        except (ContourError, QuadratureError):
            proj.cross_check = None
    return proj


def eigen_projection_oracle(A, select: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Spectral projection from a dense eigendecomposition (diagonalisable A only)."""
    A = as_matrix(A)
    w, V = sla.eig(A)
    S = np.asarray(select(w), dtype=bool)
    Vi = np.linalg.inv(V)
    return V[:, S] @ Vi[S, :]


# verification -----------------------------------------------------------------
@dataclass
class AssociationReport:
    mode: str
    defects: dict
    order_m: Optional[int]
    complement_smin: float
    tol: float
    passed: bool = field(init=False)
    failures: list = field(init=False)

    def __post_init__(self):
        self.failures = [k for k, v in self.defects.items() if not v <= self.tol]
        if self.mode == "weakly_associated" and not self.complement_smin > self.tol:
            self.failures.append("complement_injectivity")
        self.passed = not self.failures

    @property
    def max_defect(self) -> float:
        return max(self.defects.values()) if self.defects else 0.0


def verify_association(A, P, lambda_or_sigma, mode: str = "weakly_associated",
                       m: Optional[int] = None, tol: float = 1e-9) -> AssociationReport:
    """Defects of P against the (weakly) associated projection conditions."""
    A = as_matrix(A)
    Pm = np.asarray(P.matrix if isinstance(P, Projection) else P, dtype=np.complex128)
    d = A.shape[0]
    I = np.eye(d)
    defects = {"idempotency": norm2(Pm @ Pm - Pm), "commutation": norm2(Pm @ A - A @ Pm)}
    if mode == "weakly_associated":
        lam = complex(lambda_or_sigma)
        if m is None:
            m = P.order_m if isinstance(P, Projection) and P.order_m else nilpotency_order(A, lam)
        N = A - lam * I
        Nm = np.linalg.matrix_power(N, m)
        defects["nilpotency"] = norm2(Nm @ Pm)
        K, Rg = _ker_ran(Nm)
        defects["direct_sum"] = (norm2((I - Pm) @ K) if K.size else 0.0) + (norm2(Pm @ Rg) if Rg.size else 0.0)
        defects["rank"] = float(abs(np.rint(np.trace(Pm).real) - K.shape[1]))
        _, Qc = _ker_ran(I - Pm)
        smin = np.linalg.svd(N @ Qc, compute_uv=False)[-1] if Qc.shape[1] else np.inf
        return AssociationReport(mode, defects, m, float(smin), tol)
    if mode == "associated":
        if isinstance(lambda_or_sigma, Contour):
            ref = riesz_projection(A, lambda_or_sigma).matrix
        else:
            sigma = np.unique(np.round(np.atleast_1d(lambda_or_sigma), 12))
            ref = sum(weakly_associated_projection(A, s, cross_check=False).matrix for s in sigma)
        defects["oracle"] = norm2(Pm - ref)
        return AssociationReport(mode, defects, None, np.inf, tol)
    raise ValueError(f"unknown mode {mode!r}")


def dual_projection_check(A, lam: complex, P, tol: float = 1e-8) -> AssociationReport:
    """P* is weakly associated with (A*, conj(lam)) with the same order m."""
    A = as_matrix(A)
    Pm = np.asarray(P.matrix if isinstance(P, Projection) else P, dtype=np.complex128)
    m = nilpotency_order(A, lam)
    rep = verify_association(dagger(A), dagger(Pm), np.conj(lam), "weakly_associated", m=m, tol=tol)
    m_dual = nilpotency_order(dagger(A), np.conj(lam))
    rep.defects["order_mismatch"] = float(abs(m_dual - m))
    rep.__post_init__()
    return rep
