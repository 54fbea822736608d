import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import expm

from adiabatic_lab.errors import DomainError
from adiabatic_lab.evolution import (build_propagator, perturbation_bound_check, perturbed_propagator, propagate,
                                     right_derivative_defect)
from adiabatic_lab.operator_family import constant_family
from adiabatic_lab.scenarios import load_scenario

Z = np.diag([1.0, -1.0]).astype(complex)
TOL = 1e-11


def test_autonomous_exponential():
    U = propagate(lambda ts: np.broadcast_to(1j * Z, (len(ts), 2, 2)), 1.0, 0.0, 1.0, TOL)
    assert np.allclose(U, np.diag([np.exp(1j), np.exp(-1j)]), atol=1e-10)


def test_identity_when_s_equals_t():
    U = build_propagator(constant_family(1j * Z), 0.1, [0, 0.5, 1], TOL)
    assert np.array_equal(U(0.5, 0.5), np.eye(2))


def test_commuting_family_against_quadrature():
    M = np.array([[0, 1], [-1, 0.5j]], dtype=complex)
    f = lambda t: np.cos(3 * t) + t**2  # noqa: E731
    eps = 0.2
    U = propagate(lambda ts: np.asarray(f(ts))[:, None, None] * M, eps, 0.1, 0.9, TOL)
    integral = quad(f, 0.1, 0.9, epsabs=0, epsrel=1e-13)[0]
    assert np.allclose(U, expm(integral / eps * M), atol=1e-9)


def test_unitary_table_and_cocycle():
    H = np.array([[0.3, 1 - 0.2j], [1 + 0.2j, -0.7]])
    U = build_propagator(constant_family(-1j * H), 0.05, [0, 0.5, 1], TOL)
    for Uk in U.from_start:
        assert np.linalg.norm(Uk.conj().T @ Uk - np.eye(2), 2) <= 10 * TOL
    assert np.linalg.norm(U(1, 0) - U(1, 0.5) @ U(0.5, 0), 2) <= 10 * TOL


def test_cocycle_time_dependent():
    scn = load_scenario("S1")
    U = build_propagator(scn.family, 2.0**-5, np.linspace(0, 1, 5), TOL)
    assert U.cocycle_residual() <= 10 * TOL


def test_dissipative_s4_bounded():
    scn = load_scenario("S4")
    U = build_propagator(scn.family, 2.0**-6, np.linspace(0, 1, 33), TOL)
    assert np.max(np.linalg.norm(U.from_start, 2, axis=(1, 2))) <= scn.M_bound * (1 + 1e-9)


def test_right_derivative_defect():
    A = constant_family(-1j * np.array([[1.0, 0.5], [0.5, -1.0]]))
    U = build_propagator(A, 1.0, [0, 1], TOL)
    x = np.array([1.0, 1j])
    d1 = right_derivative_defect(U, A, 0.2, 0.8, x, h=1e-3)
    d2 = right_derivative_defect(U, A, 0.2, 0.8, x, h=5e-4)
    assert d2 < d1 < 1e-2
    assert d1 / d2 == pytest.approx(2.0, rel=0.05)  # O(h)
    assert right_derivative_defect(U, A, 0.2, 0.8, np.zeros(2)) == 0.0
    with pytest.raises(DomainError):
        right_derivative_defect(U, A, 0.5, 0.6, x, h=0.2)


def test_zero_perturbation_reproduces_U():
    scn = load_scenario("S1")
    U = build_propagator(scn.family, 2.0**-4, np.linspace(0, 1, 9), TOL)
    V = perturbed_propagator(U, lambda ts: np.zeros((len(ts), 2, 2), dtype=complex))
    assert np.max(np.abs(V.from_start - U.from_start)) <= 20 * TOL


@pytest.mark.parametrize("name", ["S1", "S4"])
def test_perturbation_bound_and_series(name):
    scn = load_scenario(name)
    grid = np.linspace(0, 1, 9)
    U = build_propagator(scn.family, 2.0**-4, grid, TOL)
    direct = perturbed_propagator(U, scn.kato, TOL)
    b = float(np.max(np.linalg.norm(scn.kato(np.linspace(0, 1, 257)), 2, axis=(1, 2))))
    rep = perturbation_bound_check(U, direct, b, starts=(0.0, 0.25, 0.5))
    assert rep.holds(1e-6)
    if name == "S1":
        series = perturbed_propagator(U, scn.kato, TOL, method="series")
        assert series.series.terms >= 2
        assert np.max(np.abs(series.from_start - direct.from_start)) <= 20 * TOL + series.series.term_norms[-1]
