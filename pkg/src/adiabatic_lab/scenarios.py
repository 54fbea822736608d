"""Built-in scenarios, inline scenario definitions and load-time validation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from ._linalg import norm2
from .adiabatic import ProjectionCurve, SpectralScenario
from .errors import NotSpectralValueError, ScenarioError
from .forms import FormScenario, sine_mode_crossing
from .operator_family import OperatorFamily, fd_derivative
from .spectral import EIG_TOL, verify_association, weakly_associated_projection

Scenario = Union[SpectralScenario, FormScenario]

SX = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SY = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SZ = np.array([[1, 0], [0, -1]], dtype=np.complex128)
I2 = np.eye(2, dtype=np.complex128)


def _sigma(nx, ny, nz):
    """n . sigma for arrays of components (real or complex t)."""
    nx, ny, nz = (np.asarray(a)[..., None, None] for a in (nx, ny, nz))
    return nx * SX + ny * SY + nz * SZ


def _bloch(theta, phi):
    return np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)


def _bloch_prime(theta, phi, dtheta, dphi):
    return (dtheta * np.cos(theta) * np.cos(phi) - dphi * np.sin(theta) * np.sin(phi),
            dtheta * np.cos(theta) * np.sin(phi) + dphi * np.sin(theta) * np.cos(phi),
            -dtheta * np.sin(theta))


def _spin_projection(theta, phi, dtheta, dphi):
    def val(ts):
        return 0.5 * (I2 + _sigma(*_bloch(theta(ts), phi(ts))))

    def der(ts):
        return 0.5 * _sigma(*_bloch_prime(theta(ts), phi(ts), dtheta(ts), dphi(ts)))

    return ProjectionCurve(val, der)


# S1: uniform gap, two levels -----------------------------------------------------------
def s1_gap_uniform() -> SpectralScenario:
    """A = -i (g/2) n.sigma with g = 2 + t and a non-planar path n(t) on the sphere."""
    def theta(t):
        return 0.4 + 0.8 * t + 0.1 * np.sin(2 * np.pi * t)

    def phi(t):
        return 1.3 * t + 0.3 * t**2

    def A(t):
        t = np.asarray(t)
        return (-0.5j * (2 + t))[..., None, None] * _sigma(*_bloch(theta(t), phi(t)))

    fam = OperatorFamily(A, 2, "analytic", analytic_extension=A, name="S1")
    P = _spin_projection(theta, phi, lambda t: 0.8 + 0.2 * np.pi * np.cos(2 * np.pi * t), lambda t: 1.3 + 0.6 * t)
    return SpectralScenario("S1", fam, lambda t: -0.5j * (2 + np.asarray(t)), P, "uniform", (), 1,
                            contour_radius=1.0, min_gap=2.0, M_bound=1.0,
                            description="2-level skew-adjoint family, gap 2+t, eigenvector on a non-planar path")


# S2: gap closing at one point --------------------------------------------------------------
def s2_gap_crossing(alpha: float = 4.0) -> SpectralScenario:
    """A = -i alpha (t - 1/2) n.sigma: the two eigenvalues cross at t = 1/2."""
    def theta(t):
        return 0.5 + 0.6 * t

    def phi(t):
        return 1.0 * t

    def A(t):
        t = np.asarray(t)
        return (-1j * alpha * (t - 0.5))[..., None, None] * _sigma(*_bloch(theta(t), phi(t)))

    fam = OperatorFamily(A, 2, "analytic", analytic_extension=A, name="S2")
    P = _spin_projection(theta, phi, lambda t: 0.6 + 0 * t, lambda t: 1.0 + 0 * t)
    return SpectralScenario("S2", fam, lambda t: -1j * alpha * (np.asarray(t) - 0.5), P, "nonuniform", (0.5,), 1,
                            delta0=0.5, M_bound=1.0,
                            description="2-level skew-adjoint family whose gap closes linearly at t=1/2")


# rotating frames ---------------------------------------------------------------------------
def _frame(X):
    """W(t) = exp(t X) for skew-Hermitian X, valid for complex t; returns (W, Winv)."""
    w, V = np.linalg.eigh(-1j * X)  # X = V diag(i w) V*
    Vh = V.conj().T

    def W(t):
        t = np.asarray(t)
        return (V[None] * np.exp(1j * np.multiply.outer(np.atleast_1d(t), w))[:, None, :]) @ Vh

    def Winv(t):
        return W(-np.asarray(t))

    return W, Winv


_X3 = np.array([[0, 0.5 + 0.2j, 0.3], [-0.5 + 0.2j, 0.1j, 0.4 - 0.1j], [-0.3, -0.4 - 0.1j, -0.2j]])


def _rotated(core: Callable, E: np.ndarray, X: np.ndarray = _X3):
    W, Winv = _frame(X)

    def A(t):
        t = np.atleast_1d(np.asarray(t))
        return W(t) @ core(t) @ Winv(t)

    def Pval(ts):
        return W(ts) @ E @ Winv(ts)

    def Pder(ts):
        P = Pval(ts)
        return X @ P - P @ X

    return A, ProjectionCurve(Pval, Pder)


# S3: three levels, followed level crosses both others -----------------------------------------
def s3_nogap_crossing() -> SpectralScenario:
    """W(t) diag(i(3t - 3/2), -i/2, i/2) W(t)^*: the followed level meets the others at t = 1/3, 2/3."""
    def core(t):
        out = np.zeros((len(t), 3, 3), dtype=np.complex128)
        out[:, 0, 0] = 1j * (3 * t - 1.5)
        out[:, 1, 1] = -0.5j
        out[:, 2, 2] = 0.5j
        return out

    A, P = _rotated(core, np.diag([1.0, 0, 0]).astype(np.complex128))
    fam = OperatorFamily(A, 3, "analytic", analytic_extension=A, name="S3")
    return SpectralScenario("S3", fam, lambda t: 1j * (3 * np.asarray(t) - 1.5), P, "none", (1 / 3, 2 / 3), 1,
                            delta0=0.5, M_bound=1.0,
                            description="3-level skew-adjoint family in a rotating frame with two level crossings")


# S4: Jordan block, dissipative -------------------------------------------------------------------
def s4_jordan_dissipative() -> SpectralScenario:
    """W(t) (J_2(lambda) + mu) W(t)^* with lambda = -1 + i t/2, off-diagonal 1 and mu = i(2 + t)."""
    def core(t):
        out = np.zeros((len(t), 3, 3), dtype=np.complex128)
        lam = -1 + 0.5j * t
        out[:, 0, 0] = out[:, 1, 1] = lam
        out[:, 0, 1] = 1.0
        out[:, 2, 2] = 1j * (2 + t)
        return out

    A, P = _rotated(core, np.diag([1.0, 1.0, 0]).astype(np.complex128))
    fam = OperatorFamily(A, 3, "analytic", analytic_extension=A, name="S4")
    return SpectralScenario("S4", fam, lambda t: -1 + 0.5j * np.asarray(t), P, "uniform", (), 2,
                            contour_radius=1.0, min_gap=float(np.sqrt(1 + 2.0**2)), M_bound=1.0,
                            description="3-dim dissipative family with a non-semisimple eigenvalue (m0=2)")


# S5: Landau-Zener type analytic family ---------------------------------------------------------------
def s5_analytic_family(v: float = 2.0, c: float = 0.5) -> SpectralScenario:
    """A = -i (v (t - 1/2) sigma_z + c sigma_x), following the upper level of the Hermitian part."""
    def A(t):
        s = v * (np.asarray(t) - 0.5)
        return -1j * (s[..., None, None] * SZ + c * SX)

    def E(t):
        s = v * (np.asarray(t) - 0.5)
        return np.sqrt(s * s + c * c)

    def Pval(ts):
        s = v * (ts - 0.5)
        e = E(ts)
        return 0.5 * (I2 + _sigma(c / e, 0 * s, s / e))

    def Pder(ts):
        s = v * (ts - 0.5)
        e3 = E(ts) ** 3
        return 0.5 * _sigma(-v * c * s / e3, 0 * s, v * c * c / e3)

    fam = OperatorFamily(A, 2, "analytic", analytic_extension=A, name="S5")
    return SpectralScenario("S5", fam, lambda t: -1j * E(t), ProjectionCurve(Pval, Pder), "uniform", (), 1,
                            contour_radius=0.9 * c, min_gap=2 * c, M_bound=1.0,
                            description="analytic avoided crossing (Landau-Zener), minimal gap 2c at t=1/2",
                            default_epsilons=tuple(1.0 / k for k in range(32, 97, 8)),
                            metadata={"v": v, "c": c})


# frozen-projection helper --------------------------------------------------------------------------
def _smooth_step(x):
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
    b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1 - x, 1.0)), 0.0)
    return a / (a + b)


def _smooth_step_prime(x):
    x = np.asarray(x, dtype=float)
    inside = (x > 0) & (x < 1)
    xi = np.where(inside, x, 0.5)
    a, b = np.exp(-1.0 / xi), np.exp(-1.0 / (1 - xi))
    return np.where(inside, a * b * (1 / xi**2 + 1 / (1 - xi) ** 2) / (a + b) ** 2, 0.0)


def frozen_projection(t_freeze: float = 0.3, angle: float = 1.2) -> SpectralScenario:
    """Gap-2 two-level family whose eigenvector stays fixed on [0, t_freeze] and then turns smoothly."""
    L = 1.0 - t_freeze

    def phi(t):
        return angle * _smooth_step((np.asarray(t) - t_freeze) / L)

    def A(t):
        t = np.asarray(t)
        return -1j * _sigma(*_bloch(phi(t), 0 * t))

    def dphi(t):
        t = np.asarray(t, dtype=float)
        out = angle * _smooth_step_prime((t - t_freeze) / L) / L
        return np.where(t <= t_freeze, 0.0, out)

    P = _spin_projection(phi, lambda t: 0 * np.asarray(t), dphi, lambda t: 0 * np.asarray(t))
    fam = OperatorFamily(A, 2, 8, name="frozen")
    return SpectralScenario("frozen", fam, lambda t: -1j + 0 * np.asarray(t), P, "uniform", (), 1,
                            contour_radius=1.0, min_gap=2.0, M_bound=1.0,
                            description=f"eigenvector frozen on [0, {t_freeze}], C-infinity but not analytic",
                            metadata={"t_freeze": t_freeze})


def constant_scenario() -> SpectralScenario:
    """Time-independent diagonal family; every defect sits at the integrator floor."""
    M = np.diag([-1j, 1j]).astype(np.complex128)

    def A(t):
        return np.broadcast_to(M, np.shape(np.atleast_1d(t)) + (2, 2)).copy()

    E = np.diag([1.0, 0.0]).astype(np.complex128)
    P = ProjectionCurve(lambda ts: np.broadcast_to(E, (len(ts), 2, 2)).copy(),
                        lambda ts: np.zeros((len(ts), 2, 2), dtype=np.complex128))
    fam = OperatorFamily(A, 2, "analytic", analytic_extension=A, name="constant")
    return SpectralScenario("constant", fam, lambda t: -1j + 0 * np.asarray(t), P, "uniform", (), 1,
                            contour_radius=1.0, min_gap=2.0)


CATALOG = {
    "S1": ("gap_uniform_2level", s1_gap_uniform),
    "S2": ("gap_crossing", s2_gap_crossing),
    "S3": ("nogap_crossing", s3_nogap_crossing),
    "S4": ("jordan_dissipative", s4_jordan_dissipative),
    "S5": ("analytic_family", s5_analytic_family),
    "S6": ("form_crossing", sine_mode_crossing),
}
EXTRA = {"frozen": frozen_projection, "constant": constant_scenario}


def list_scenarios() -> list:
    return [(k, alias) for k, (alias, _) in CATALOG.items()]


# inline definitions ----------------------------------------------------------------------------------
def _cnum(v) -> complex:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ScenarioError(f"complex entries are [re, im] pairs, got {v!r}", "inline_syntax")
        return complex(float(v[0]), float(v[1]))
    return complex(float(v))


def _cmatrix(rows) -> np.ndarray:
    return np.array([[_cnum(x) for x in row] for row in rows], dtype=np.complex128)


def coefficient(spec: dict) -> Callable:
    """Scalar coefficient function from {"poly": [c0, c1, ...]} or {"sin"|"cos": [amp, freq, phase]}.

    Works for complex t, so inline families are always analytic.
    """
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ScenarioError(f"coefficient must be a one-key table, got {spec!r}", "inline_syntax")
    (kind, args), = spec.items()
    if kind == "poly":
        cs = [_cnum(c) for c in args]
        return lambda t: sum(c * np.asarray(t) ** k for k, c in enumerate(cs))
    if kind in ("sin", "cos"):
        amp, freq, phase = (_cnum(a) for a in args)
        f = np.sin if kind == "sin" else np.cos
        return lambda t: amp * f(freq * np.asarray(t) + phase)
    raise ScenarioError(f"unknown coefficient kind {kind!r} (poly, sin, cos)", "inline_syntax")


def inline_scenario(defn: dict) -> SpectralScenario:
    """Scenario from a table: A(t) = sum_j f_j(t) M_j, lambda(t) = sum_j g_j(t) c_j.

    With ``contour_radius`` set, P(t) and P'(t) come from a batched contour integral around
    lambda(t).  Without it P(t) is the weakly associated projection and P' is taken by
    finite differences, which is slow inside the propagators.
    """
    try:
        name = str(defn.get("name", "inline"))
        terms = [(coefficient(t["coef"]), _cmatrix(t["matrix"])) for t in defn["terms"]]
        lam_terms = [(coefficient(t["coef"]), _cnum(t.get("value", 1.0))) for t in defn["lambda"]]
    except KeyError as exc:
        raise ScenarioError(f"inline scenario is missing {exc}", "inline_syntax") from exc
    dim = terms[0][1].shape[0]
    if any(M.shape != (dim, dim) for _, M in terms):
        raise ScenarioError("inline matrices must be square and of equal size", "inline_syntax")

    def A(t):
        t = np.atleast_1d(np.asarray(t))
        return sum(np.asarray(f(t))[..., None, None] * M for f, M in terms) + np.zeros((len(t), dim, dim))

    def lam(t):
        t = np.atleast_1d(np.asarray(t))
        return sum(np.asarray(f(t)) * c for f, c in lam_terms) + 0j * t

    def Pval(ts):
        As = A(ts)
        ls = lam(ts)
        return np.stack([weakly_associated_projection(a, l, cross_check=False).matrix for a, l in zip(As, ls)])

    radius = defn.get("contour_radius")
    Pder = None
    if radius is not None:
        # circle around lambda(t): batched resolvents give P and P' = (1/2 pi i) oint R A' R dz
        w = np.exp(2j * np.pi * (np.arange(64) + 0.5) / 64)
        sc = 0.1 * np.exp(2j * np.pi * np.arange(16) / 16)

        def _res(ts):
            ts = np.atleast_1d(np.asarray(ts, dtype=float))
            dz = float(radius) * np.broadcast_to(w, (len(ts), len(w)))
            z = lam(ts)[:, None] + dz
            R = np.linalg.inv(z[..., None, None] * np.eye(dim) - A(ts)[:, None])
            return ts, R, dz

        def Pval(ts):  # noqa: F811
            _, R, dz = _res(ts)
            return np.mean(R * dz[..., None, None], axis=1)

        def Pder(ts):
            ts, R, dz = _res(ts)
            # A'(t) by the Cauchy formula on a small circle; the coefficients are entire
            Ad = np.mean(np.stack([A(ts + h) / h for h in sc]), axis=0)
            return np.mean(R @ Ad[:, None] @ R * dz[..., None, None], axis=1)

    fam = OperatorFamily(A, dim, "analytic", analytic_extension=A, name=name)
    return SpectralScenario(name, fam, lam, ProjectionCurve(Pval, Pder), str(defn.get("gap_class", "uniform")),
                            tuple(defn.get("crossing_set", ())), int(defn.get("m0", 1)),
                            contour_radius=defn.get("contour_radius"), M_bound=float(defn.get("M_bound", 1.0)),
                            description=str(defn.get("description", "inline scenario")))


# validation -------------------------------------------------------------------------------------------
@dataclass
class ValidationReport:
    name: str
    checks: dict  # check name -> max defect

    def to_dict(self) -> dict:
        return {"name": self.name, "checks": self.checks}


def _away(ts, crossing_set, width=1e-9):
    mask = np.ones(len(ts), dtype=bool)
    for c in crossing_set:
        mask &= np.abs(ts - c) > width
    return mask


def validate_scenario(scn: Scenario, grid_points: int = 33) -> ValidationReport:
    """Check the scenario invariants on a uniform grid; raises ScenarioError naming the failing check."""
    spec = scn.to_spectral() if isinstance(scn, FormScenario) else scn
    grid = np.linspace(0.0, 1.0, grid_points)
    A = spec.family.eval_many(grid)
    lam = spec.lam(grid)
    P = spec.projection_curve.value(grid)
    d = spec.dim
    I = np.eye(d)
    checks = {}
    # lambda(t) in the spectrum
    smin = np.linalg.svd(A - lam[:, None, None] * I, compute_uv=False)[:, -1]
    scale = np.maximum(1.0, norm2(A))
    worst = float(np.max(smin / scale))
    checks["eigenvalue"] = worst
    if worst > EIG_TOL:
        k = int(np.argmax(smin / scale))
        raise ScenarioError(f"{spec.name}: lambda({grid[k]:.4g}) = {lam[k]:.6g} is not an eigenvalue "
                            f"(sigma_min {smin[k]:.2e})", "eigenvalue")
    # association away from crossings
    assoc = 0.0
    for k in np.nonzero(_away(grid, spec.crossing_set))[0]:
        rep = verify_association(A[k], P[k], lam[k], "weakly_associated", tol=1e-8)
        assoc = max(assoc, max(rep.defects.values()))
        if not rep.passed:
            raise ScenarioError(f"{spec.name}: P({grid[k]:.4g}) fails association: {rep.failures}", "association")
        if rep.order_m is not None and rep.order_m > spec.m0:
            raise ScenarioError(f"{spec.name}: nilpotency order {rep.order_m} exceeds m0={spec.m0}", "association")
    checks["association"] = assoc
    # P twice differentiable; declared derivative consistent with differences of P
    pd = spec.projection_curve.derivative(grid)
    rel1 = rel2 = 0.0
    for k, t in enumerate(grid[1:-1:4]):
        d1 = fd_derivative(spec.projection_curve.value, float(t), 1)
        rel1 = max(rel1, norm2(d1.matrix - pd[1 + 4 * k]) / max(1.0, norm2(pd[1 + 4 * k])))
        d2 = fd_derivative(spec.projection_curve.value, float(t), 2)
        rel2 = max(rel2, d2.error_estimate / max(1.0, norm2(d2.matrix)))
    checks["smoothness"] = max(rel1, rel2)
    if rel1 > 1e-6 or rel2 > 1e-3 or not np.isfinite(rel2):
        raise ScenarioError(f"{spec.name}: projection curve fails the C^2 check ({rel1:.1e}, {rel2:.1e})", "smoothness")
    # ray condition
    if spec.gap_class != "uniform":
        ray_min = np.inf
        theta = np.asarray(spec.theta_curve(grid), dtype=float) + 0 * grid
        ev = np.linalg.eigvals(A)
        for dl in spec.delta0 * np.logspace(-4, 0, 9):
            pts = lam + dl * np.exp(1j * theta)
            dist = np.min(np.abs(ev - pts[:, None]), axis=1) / dl
            ray_min = min(ray_min, float(np.min(dist)))
        checks["ray"] = ray_min
        if ray_min < 1e-6:
            raise ScenarioError(f"{spec.name}: lambda + delta e^(i theta) meets the spectrum", "ray")
    else:
        if spec.contour_radius is not None:
            ev = np.linalg.eigvals(A)
            dist = np.abs(ev - lam[:, None])
            # contour must enclose lambda only, with no eigenvalue near the circle
            inside = dist < spec.contour_radius
            margin = float(np.min(np.abs(dist - spec.contour_radius)))
            checks["contour_margin"] = margin
            rank = np.rint(np.trace(P, axis1=1, axis2=2).real)
            if margin < 1e-3 or np.any(inside.sum(1) != rank):
                raise ScenarioError(f"{spec.name}: contour radius does not isolate lambda", "contour")
    return ValidationReport(spec.name, checks)


def load_scenario(name_or_inline, validate: bool = True) -> Scenario:
    """A built-in scenario by id or alias, or an inline definition table."""
    if isinstance(name_or_inline, dict):
        scn = inline_scenario(name_or_inline)
    else:
        key = str(name_or_inline)
        aliases = {alias: k for k, (alias, _) in CATALOG.items()}
        key = aliases.get(key, key)
        if key in CATALOG:
            scn = CATALOG[key][1]()
        elif key in EXTRA:
            scn = EXTRA[key]()
        else:
            raise ScenarioError(f"unknown scenario {name_or_inline!r}; known: {sorted(CATALOG) + sorted(EXTRA)}",
                                "name")
    if validate:
        try:
            validate_scenario(scn)
        except NotSpectralValueError as exc:
            raise ScenarioError(f"eigenvalue check failed: {exc}", "eigenvalue") from exc
    return scn
