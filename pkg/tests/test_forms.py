import numpy as np
import pytest
from scipy.linalg import eigh, expm

from adiabatic_lab.adiabatic import ProjectionCurve
from adiabatic_lab.errors import CapabilityError, ConditioningError, NearSingularityError, ScenarioError
from adiabatic_lab.forms import (FormFamily, FormScenario, delta_resolvent_probe, dual_resolvent_identity_check,
                                 form_invariants, form_nogap_harness, kisynski_propagate, operator_from_form,
                                 self_adjointness_defect)
from adiabatic_lab.scenarios import load_scenario


def const_form(F, G=None, **kw):
    F = np.asarray(F, dtype=complex)
    G = np.eye(F.shape[0]) if G is None else G
    return FormFamily(G, lambda ts: np.broadcast_to(F, (len(ts),) + F.shape).copy(), **kw)


@pytest.fixture(scope="module")
def s6():
    return load_scenario("S6")


def test_operator_examples():
    assert np.allclose(operator_from_form(const_form(np.diag([1.0, 4.0])), 0.5), np.diag([1, 4]))
    ff = const_form(np.diag([2.0, 8.0]), np.diag([2.0, 2.0]))
    assert np.allclose(operator_from_form(ff, 0.5), np.diag([1, 4]))
    assert self_adjointness_defect(ff, 0.5) <= 1e-14


def test_form_family_definitional_relations():
    G = np.array([[2.0, 0.5], [0.5, 1.0]])
    ff = const_form(np.diag([3.0, 1.0]), G, m=2.0)
    assert np.allclose(ff.gram_Hplus_t([0.3])[0], np.diag([3.0, 1.0]) + 2.0 * G)


def test_form_family_rejects_bad_input():
    with pytest.raises(ScenarioError):
        const_form(np.diag([1.0, 1.0]), np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ScenarioError):
        const_form(np.array([[1.0, 1j], [1j, 1.0]]))
    with pytest.raises(ConditioningError):
        const_form(np.diag([1.0, 1.0]), np.diag([1.0, 1e-14]))


def test_sine_mode_eigenvalues_against_generalized_oracle(s6):
    ff = s6.form
    for t in (0.0, 0.5, 1.0):
        A0 = operator_from_form(ff, t)
        ours = np.sort(np.linalg.eigvals(A0).real)
        oracle = eigh(ff.form_t([t])[0], ff.gram_H, eigvals_only=True)
        assert np.allclose(ours, oracle, rtol=1e-12, atol=1e-10)
    # away from the rank-one mode the spectrum is the unperturbed k^2
    high = np.sort(np.linalg.eigvals(operator_from_form(ff, 0.2)).real)[-5:]
    assert np.allclose(high, np.arange(12, 17) ** 2, rtol=1e-12)


def test_dual_resolvent_examples():
    assert dual_resolvent_identity_check(const_form(np.diag([1.0, 4.0])), 0.2, 0.5 + 1j).defect <= 1e-12
    ff = const_form(np.diag([2.0, 8.0]), np.diag([2.0, 2.0]))
    assert dual_resolvent_identity_check(ff, 0.0, 0.0).defect <= 1e-12
    with pytest.raises(NearSingularityError) as info:
        dual_resolvent_identity_check(ff, 0.0, 4.0)
    assert "both" in str(info.value)


def test_kisynski_constant_diagonal():
    ff = const_form(np.diag([1.0, 4.0]))
    eps = 0.1
    U = kisynski_propagate(ff, eps, np.linspace(0, 1, 5))
    assert np.allclose(U.from_start[-1], expm(-1j / eps * np.diag([1.0, 4.0])), atol=1e-9)
    assert U.unitarity_defect <= 1e-12


def test_kisynski_needs_two_derivatives():
    with pytest.raises(CapabilityError):
        kisynski_propagate(const_form(np.eye(2), smoothness=1), 0.1, [0, 1])


def test_kisynski_s6_unitary_across_sweep(s6):
    tol = 1e-10
    defects = [kisynski_propagate(s6.form, e, np.linspace(0, 1, 33), tol).unitarity_defect
               for e in (2.0**-3, 2.0**-5)]
    assert max(defects) <= 20 * tol


def test_invariants_s6(s6):
    inv = form_invariants(s6)
    assert inv["dual_resolvent_max"] <= 1e-10
    assert inv["self_adjointness"] <= 1e-10
    assert inv["trace_formula"] <= 1e-8 and inv["eigen_inclusion"] <= 1e-8


def test_delta_probe_constant_family():
    ff = const_form(np.diag([1.0, 4.0]))
    P = ProjectionCurve(lambda ts: np.broadcast_to(np.diag([1.0, 0.0]), (len(ts), 2, 2)).astype(complex),
                        lambda ts: np.zeros((len(ts), 2, 2), dtype=complex))
    rep = delta_resolvent_probe(ff, lambda ts: -1j + 0 * ts, P, [0.5, 0.1, 0.01], np.linspace(0, 1, 9))
    assert max(rep.derivative_sup) <= 1e-8 and rep.derivative_exponent == 0.0


def test_delta_probe_s6_exponents_and_domain(s6):
    rep = delta_resolvent_probe(s6.form, s6.lambda_curve, s6.projection_curve, [2.0, 1.0, 0.1, 0.01, 0.001],
                                np.linspace(0, 1, 33))
    assert rep.resolvent_exponent <= 1.1 and rep.derivative_exponent <= 2.1
    assert rep.excluded == [2.0] and "outside" in rep.notes[0]


def _rotating_form(gram_scale=2.0):
    def R(t):
        c, s = np.cos(1.2 * t), np.sin(1.2 * t)
        return np.array([[c, -s], [s, c]])

    form = FormFamily(gram_scale * np.eye(2),
                      lambda ts: np.stack([gram_scale * R(t) @ np.diag([1.0, 4.0]) @ R(t).T for t in ts]).astype(complex))

    def P(ts):
        return np.stack([np.outer(R(t)[:, 0], R(t)[:, 0]) for t in ts]).astype(complex)

    def Pd(ts):
        out = []
        for t in ts:
            v = R(t)[:, 0]
            w = 1.2 * R(t)[:, 1]
            out.append(np.outer(w, v) + np.outer(v, w))
        return np.stack(out).astype(complex)

    return FormScenario("rot", form, lambda ts: -1j + 0 * np.asarray(ts), ProjectionCurve(P, Pd))


def test_gap_form_scenario_has_linear_rate():
    fs = _rotating_form()
    res = form_nogap_harness(fs, [2.0**-k for k in range(3, 8)], grid_points=33, with_V=True)
    fit = res.sweeps["UV"].fit
    assert 0.85 <= fit.slope_or_g <= 1.15


def test_invariant_block_gives_floor_defects():
    F = np.diag([1.0, 4.0, 9.0])
    form = FormFamily(np.eye(3), lambda ts: np.stack([F + np.diag([t, 0, 2 * t]) for t in ts]).astype(complex))
    P = ProjectionCurve(lambda ts: np.broadcast_to(np.diag([1.0, 0, 0]), (len(ts), 3, 3)).astype(complex),
                        lambda ts: np.zeros((len(ts), 3, 3), dtype=complex))
    fs = FormScenario("block", form, lambda ts: -1j * (1 + np.asarray(ts)), P)
    res = form_nogap_harness(fs, [2.0**-k for k in range(3, 7)], grid_points=33, with_V=False)
    for kind in ("UV0_P0", "offdiag_1", "offdiag_2"):
        sw = res.sweeps[kind]
        assert all(d <= 10 * f for d, f in zip(sw.defects, sw.floors)), kind
