import numpy as np
import pytest

from adiabatic_lab.adiabatic import (ProjectionCurve, adiabatic_defect, adiabatic_generator, approx_commutator_B,
                                     bump, commutator_B, fit_rate, gap_harness, intertwining_defect, kato_generator,
                                     make_sweep, mollified_Pprime, offdiag_defect, partial_integration_check,
                                     SweepResult, sylvester_commutator)
from adiabatic_lab.errors import RayViolationError, UnderdeterminedFitError, UsageError
from adiabatic_lab.evolution import build_propagator
from adiabatic_lab.operator_family import OperatorFamily, constant_family
from adiabatic_lab.scenarios import load_scenario
from adiabatic_lab.spectral import circle

TOL = 1e-11
ROT = np.array([[0, -1], [1, 0]], dtype=complex)


def rotating(phi, dphi):
    def value(ts):
        c, s = np.cos(phi(ts)), np.sin(phi(ts))
        return np.stack([np.stack([c * c, c * s], -1), np.stack([c * s, s * s], -1)], -2).astype(complex)

    def deriv(ts):
        c, s, w = np.cos(phi(ts)), np.sin(phi(ts)), dphi(ts)
        return (w[:, None, None] * np.stack([np.stack([-2 * c * s, c * c - s * s], -1),
                                             np.stack([c * c - s * s, 2 * c * s], -1)], -2)).astype(complex)

    return ProjectionCurve(value, deriv, "rotating")


def const_curve(P):
    P = np.asarray(P, dtype=complex)
    return ProjectionCurve(lambda ts: np.broadcast_to(P, (len(np.atleast_1d(ts)),) + P.shape).copy(),
                           lambda ts: np.zeros((len(np.atleast_1d(ts)),) + P.shape, dtype=complex))


# Kato generator -----------------------------------------------------------------
def test_kato_constant_projection():
    assert np.array_equal(kato_generator(const_curve(np.diag([1, 0])), 0.3), np.zeros((2, 2)))


@pytest.mark.parametrize("t", [0.0, 0.37, 1.0])
def test_kato_rotating_projector_closed_form(t):
    # P onto (cos phi, sin phi): [P', P] = phi' * rotation generator
    phi, dphi = (lambda ts: 1.3 * ts + 0.4 * ts**2), (lambda ts: 1.3 + 0.8 * ts)
    K, ppp = kato_generator(rotating(phi, dphi), t, return_defect=True)
    assert np.allclose(K, dphi(np.array([t]))[0] * ROT, atol=1e-14)
    assert ppp <= 1e-10


@pytest.mark.parametrize("name", ["S1", "S2", "S3", "S4", "S5", "frozen"])
def test_ppp_identity_on_scenarios(name):
    scn = load_scenario(name)
    for t in np.linspace(0, 1, 11):
        assert kato_generator(scn.projection_curve, t, return_defect=True)[1] <= 1e-10


# commutator equation ----------------------------------------------------------------
def test_commutator_diagonal_matches_sylvester():
    a1, a2 = 1j, -0.5 + 2j
    A = np.diag([a1, a2])
    P = np.diag([1, 0]).astype(complex)
    Pp = np.array([[0, 0.3 - 1j], [2 + 0.5j, 0]])  # P' = P'P + PP'
    res = commutator_B(A, Pp, circle(a1, 1.0))
    C = Pp @ P - P @ Pp
    assert res.residual <= 1e-8
    assert np.allclose(res.B, sylvester_commutator(A, P, C), atol=1e-8)
    assert res.B[0, 1] == pytest.approx(C[0, 1] / (a2 - a1), abs=1e-10)
    assert res.B[1, 0] == pytest.approx(C[1, 0] / (a1 - a2), abs=1e-10)


def test_commutator_zero_derivative():
    assert np.allclose(commutator_B(np.diag([1j, 2j]), np.zeros((2, 2)), circle(1j, 0.5)).B, 0)


def test_commutator_jordan_s4():
    scn = load_scenario("S4")
    t = 0.41
    A = scn.family(t)
    Pp = scn.projection_curve.derivative([t])[0]
    res = commutator_B(A, Pp, scn.contour(t))
    assert res.residual <= 1e-8
    assert np.allclose(res.B, sylvester_commutator(A, res.P, Pp @ res.P - res.P @ Pp), atol=1e-8)


# mollifier ----------------------------------------------------------------------------
def test_bump_unit_mass():
    from scipy.integrate import quad
    assert quad(bump, -1, 1, epsabs=0, epsrel=1e-12)[0] == pytest.approx(1.0, rel=1e-11)
    assert bump(np.array([-1.0, 1.0, 2.0])).tolist() == [0, 0, 0]


def test_mollifier_constant_projection_and_constant_derivative():
    assert np.array_equal(mollified_Pprime(const_curve(np.diag([1, 0])), 5, 0.5), np.zeros((2, 2)))
    C = np.array([[0, 1], [2j, 0]])
    lin = ProjectionCurve(lambda ts: np.zeros((len(ts), 2, 2)), lambda ts: np.broadcast_to(C, (len(ts), 2, 2)))
    assert np.allclose(mollified_Pprime(lin, 8, 0.5), C, atol=1e-12)


def test_mollifier_rate_on_rotating_projector():
    pc = rotating(lambda ts: np.sin(3 * ts), lambda ts: 3 * np.cos(3 * ts))
    ts = np.linspace(0.2, 0.8, 7)
    errs = []
    for n in (8, 16, 32):
        errs.append(max(np.linalg.norm(mollified_Pprime(pc, n, t) - pc.derivative([t])[0], 2) for t in ts))
    # at least c/n; the symmetric bump actually gives c/n^2
    assert all(e * n <= errs[0] * 8 for e, n in zip(errs, (8, 16, 32)))
    assert errs[2] < errs[1] < errs[0]


# approximate commutator ---------------------------------------------------------------------
def test_approx_commutator_m0_1_formula():
    A = np.diag([1j, 2j, -1.5j])
    P = np.diag([1, 0, 0]).astype(complex)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    Q = P @ X @ (np.eye(3) - P) + (np.eye(3) - P) @ X @ P
    delta = 0.3
    out = approx_commutator_B(A, P, 1j, Q, [delta], theta=0.0, m0=1)
    Rbar = np.linalg.solve((1j + delta) * np.eye(3) - A, np.eye(3) - P)
    assert np.allclose(out.B, Rbar @ Q @ P + P @ Q @ Rbar, atol=1e-14)
    assert out.residual <= 1e-9


def test_approx_commutator_m0_2_jordan():
    lam = -1 + 0.5j
    A = np.zeros((3, 3), dtype=complex)
    A[:2, :2] = [[lam, 1], [0, lam]]
    A[2, 2] = 2j
    P = np.diag([1, 1, 0]).astype(complex)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    Q = P @ X @ (np.eye(3) - P) + (np.eye(3) - P) @ X @ P
    out = approx_commutator_B(A, P, lam, Q, [0.2, 0.4], theta=0.7, m0=2)
    assert out.residual <= 1e-9
    assert len(out.resolvent_norms) == 2


def test_approx_commutator_zero_Q():
    out = approx_commutator_B(np.diag([1j, 2j]), np.diag([1, 0]), 1j, np.zeros((2, 2)), [0.1])
    assert not out.B.any() and not out.C.any()


def test_approx_commutator_ray_violation():
    with pytest.raises(RayViolationError) as info:
        approx_commutator_B(np.diag([0.0, 1.0]), np.diag([1, 0]), 0.0, np.zeros((2, 2)), [1.0], theta=0.0)
    assert info.value.delta == 1.0


def test_remainder_vanishes_with_delta_on_s2():
    scn = load_scenario("S2")
    t, n = 0.3, 8
    A, P = scn.family(t), scn.projection_curve(t)
    Q = mollified_Pprime(scn.projection_curve, n, t)
    norms = [np.linalg.norm(approx_commutator_B(A, P, scn.lam([t])[0], Q, [d], scn.theta_curve(t)).C, 2)
             for d in (1e-1, 1e-2, 1e-3)]
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] / norms[1] == pytest.approx(0.1, rel=0.05)


# defects -------------------------------------------------------------------------------
def test_identical_generators_give_floor_defect():
    fam = constant_family(-1j * np.diag([1.0, -1.0]))
    g = np.linspace(0, 1, 9)
    U = build_propagator(fam, 0.05, g, TOL)
    V = build_propagator(fam.eval_many, 0.05, g, TOL, generator_id="copy")
    assert adiabatic_defect(U, V) <= 20 * TOL
    W = build_propagator(fam, 0.1, g, TOL)
    with pytest.raises(UsageError):
        adiabatic_defect(U, W)


def _uv(scn, eps, grid):
    U = build_propagator(scn.family, eps, grid, TOL)
    V = build_propagator(adiabatic_generator(scn, eps), eps, grid, TOL)
    return U, V


def test_s1_defect_ratio_over_four_halvings():
    scn = load_scenario("S1")
    g = np.linspace(0, 1, 65)
    d4 = adiabatic_defect(*_uv(scn, 2.0**-4, g))
    d8 = adiabatic_defect(*_uv(scn, 2.0**-8, g))
    assert 8 <= d4 / d8 <= 32


def test_grid_refinement_values_stable():
    # the sampled sup moves with the grid (the defect oscillates on the eps scale);
    # the propagated values at shared grid points do not
    scn = load_scenario("S1")
    eps = 2.0**-6
    U1, V1 = _uv(scn, eps, np.linspace(0, 1, 33))
    U2, V2 = _uv(scn, eps, np.linspace(0, 1, 65))
    diff = np.max(np.abs((U1.from_start - V1.from_start) - (U2.from_start - V2.from_start)[::2]))
    assert diff <= 10 * TOL


def test_offdiag_block_diagonal_family():
    fam = OperatorFamily(lambda ts: np.stack([np.diag([1j * (1 + t), -2j * t**2]) for t in ts]), 2, 2)
    U = build_propagator(fam, 0.01, np.linspace(0, 1, 17), TOL)
    a, b = offdiag_defect(U, const_curve(np.diag([1, 0])))
    assert a <= 10 * TOL and b <= 10 * TOL


def test_offdiag_halving_and_swap():
    scn = load_scenario("S1")
    g = np.linspace(0, 1, 65)
    Ua = build_propagator(scn.family, 2.0**-6, g, TOL)
    Ub = build_propagator(scn.family, 2.0**-7, g, TOL)
    a1, b1 = offdiag_defect(Ua, scn.projection_curve)
    a2, b2 = offdiag_defect(Ub, scn.projection_curve)
    assert 1 <= a1 / a2 <= 4 and 1 <= b1 / b2 <= 4
    s1, s2 = offdiag_defect(Ua, scn.projection_curve.complement())
    assert s1 == pytest.approx(b1, rel=1e-12) and s2 == pytest.approx(a1, rel=1e-12)


def test_intertwining_exact_on_s1():
    scn = load_scenario("S1")
    _, V = _uv(scn, 2.0**-5, np.linspace(0, 1, 33))
    assert intertwining_defect(V, scn.projection_curve) <= 20 * TOL


def test_partial_integration_identity_s1():
    out = partial_integration_check(load_scenario("S1"), 2.0**-3)
    assert out["defect"] <= 1e-9
    assert out["lhs_size"] > 1e-2  # the identity is non-trivial here


# fits -----------------------------------------------------------------------------
EPS = [2.0**-k for k in range(3, 11)]


def test_fit_exact_power():
    rec = fit_rate([(e, 3 * e) for e in EPS], "power")
    assert rec.slope_or_g == pytest.approx(1.0, abs=1e-12) and rec.r_squared == pytest.approx(1.0)


def test_fit_exact_exponential():
    eps = [1 / k for k in range(4, 12)]
    rec = fit_rate([(e, 5 * np.exp(-2 / e)) for e in eps], "exponential")
    assert rec.slope_or_g == pytest.approx(2.0, abs=1e-10) and rec.r_squared == pytest.approx(1.0)


def test_fit_excludes_floor_samples():
    samples = [(e, e) for e in EPS[:5]] + [(e, 1e-12) for e in EPS[5:]]
    rec = fit_rate(samples, "power", floor=1e-12)
    assert len(rec.used) == 5 and [x[0] for x in rec.excluded] == EPS[5:]
    assert all(x[2] == "below_floor" for x in rec.excluded)
    with pytest.raises(UnderdeterminedFitError):
        fit_rate(samples[:3], "power")


def test_make_sweep_per_sample_floor_and_validation():
    sw = make_sweep("X", "UV", [(e, e) for e in EPS], [1e-12] * 6 + [1e-3, 1e-3], "power")
    assert len(sw.fit.excluded) == 2 and sw.integrator_floor == 1e-3
    with pytest.raises(ValueError):
        SweepResult("X", "UV", [(0.1, 1.0), (0.2, 0.5)], None, 0.0)
    with pytest.raises(ValueError):
        SweepResult("X", "UV", [(0.2, 1.0), (0.1, -0.5)], None, 0.0)


def test_gap_harness_short_sweep():
    res = gap_harness(load_scenario("S1"), EPS[:5], grid_points=33)
    fit = res.sweeps["UV"].fit
    assert 0.85 <= fit.slope_or_g <= 1.15
    assert all(v <= res.invariants["intertwining_bound"][k] for k, v in res.invariants["intertwining"].items())
    assert res.invariants["ppp_defect"] <= 1e-10
