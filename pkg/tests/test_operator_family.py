import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adiabatic_lab.errors import CapabilityError, DomainError
from adiabatic_lab.operator_family import (OperatorFamily, constant_family, eval_derivative, eval_operator,
                                           scalar_times_family, taylor_jets, validate_smoothness)
from adiabatic_lab.scenarios import load_scenario

SZ = np.diag([1.0, -1.0]).astype(complex)
M = np.array([[1, 2j], [0.5, -1]], dtype=complex)


def test_constant_family_eval():
    fam = constant_family(np.diag([1j, -1j]))
    assert np.array_equal(eval_operator(fam, 0.7), np.diag([1j, -1j]))


def test_crossing_family_zero_at_half():
    fam = scalar_times_family(lambda t: 2 * t - 1, [lambda t: 2 + 0 * t], 1j * SZ)
    assert np.allclose(eval_operator(fam, 0.5), 0, atol=0)


def test_s1_at_zero_matches_closed_form():
    # g = 2, theta = 0.4, phi = 0: A = -(i g / 2) n.sigma with n = (sin th, 0, cos th)
    A0 = eval_operator(load_scenario("S1").family, 0.0)
    th = 0.4
    ns = np.array([[np.cos(th), np.sin(th)], [np.sin(th), -np.cos(th)]])
    assert np.allclose(A0, -1j * ns, atol=1e-14)


def test_t_outside_unit_interval():
    fam = constant_family(SZ)
    with pytest.raises(DomainError):
        eval_operator(fam, 1.5)
    with pytest.raises(DomainError):
        fam.eval_many([-0.1, 0.2])


def test_derivatives_constant_and_linear():
    assert np.allclose(eval_derivative(constant_family(SZ), 0.3, 1).matrix, 0)
    lin = OperatorFamily(lambda ts: ts[:, None, None] * M, 2, 1)
    d = eval_derivative(lin, 0.4, 1)
    assert d.source == "finite_difference"
    assert np.allclose(d.matrix, M, atol=1e-9)


def test_second_derivative_of_sin_at_zero():
    fam = OperatorFamily(lambda ts: np.sin(ts)[:, None, None] * M, 2, 4)
    d = eval_derivative(fam, 0.0, 2)
    assert np.max(np.abs(d.matrix)) < 1e-6


def test_derivative_beyond_smoothness_refused():
    fam = OperatorFamily(lambda ts: ts[:, None, None] * M, 2, 1)
    with pytest.raises(CapabilityError):
        eval_derivative(fam, 0.5, 3)
    assert eval_derivative(fam, 0.5, 3, allow_fd=True).source == "finite_difference"


def test_validate_smoothness():
    grid = np.linspace(0, 1, 9)
    assert validate_smoothness(constant_family(SZ), 2, grid).max_defect == 0
    sq = OperatorFamily(lambda ts: (ts**2)[:, None, None] * M, 2, 2,
                        derivs=[lambda ts: (2 * ts)[:, None, None] * M, lambda ts: 2 * M + 0 * ts[:, None, None]])
    rep = validate_smoothness(sq, 2, grid)
    assert rep.passed and rep.max_defect < 1e-8
    wrong = OperatorFamily(lambda ts: (ts**2)[:, None, None] * M, 2, 2,
                           derivs=[lambda ts: (4 * ts)[:, None, None] * M])
    bad = validate_smoothness(wrong, 1, grid[1:])
    assert not bad.passed
    assert 0.4 < bad.max_defect <= 1.0  # 2x the true derivative: relative defect ~ 1/2..1


def test_analytic_needs_extension():
    with pytest.raises(CapabilityError):
        OperatorFamily(lambda ts: ts[:, None, None] * M, 2, "analytic")


@settings(max_examples=25, deadline=None)
@given(t=st.floats(0.1, 0.9), k=st.integers(0, 5))
def test_taylor_jets_of_exponential(t, k):
    # A(t) = exp(2t) M has jets 2^k exp(2t)/k! M
    f = lambda z: np.exp(2 * np.asarray(z))  # noqa: E731
    fam = scalar_times_family(f, [lambda z: 2 * f(z)], M)
    jets = taylor_jets(fam, [t], 5)[0]
    expect = 2.0**k * np.exp(2 * t) / math.factorial(k) * M
    # Cauchy-formula round-off grows like eps_mach / radius^k (radius 0.05)
    assert np.allclose(jets[k], expect, rtol=1e-8, atol=1e-12)
