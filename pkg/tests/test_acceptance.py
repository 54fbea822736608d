"""Acceptance criteria, one PASS/FAIL line each.

Runs under pytest (lines go straight to the terminal) or as a script:
``python3 tests/test_acceptance.py``.
"""
import functools
import os
import time

import numpy as np
import pytest

from adiabatic_lab.adiabatic import commutator_B, kato_generator, sylvester_commutator
from adiabatic_lab.config import load_config
from adiabatic_lab.evolution import build_propagator, perturbation_bound_check, perturbed_propagator
from adiabatic_lab.experiment import run_experiment
from adiabatic_lab.forms import FormScenario, form_invariants
from adiabatic_lab.scenarios import CATALOG, EXTRA, load_scenario
from adiabatic_lab.spectral import (circle, dual_projection_check, eigen_projection_oracle, riesz_projection,
                                    verify_association, weakly_associated_projection)

CONFIGS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "configs")


@functools.lru_cache(maxsize=None)
def report(name):
    cfg = load_config(os.path.join(CONFIGS, f"{name}.toml"))
    t0 = time.perf_counter()
    rep = run_experiment(cfg)
    return rep, time.perf_counter() - t0, cfg


def _fit(rep, kind):
    return rep.sweep(kind)["fit"]


def _sweep_decays(rep, kind):
    d = np.array([s[1] for s in rep.sweep(kind)["samples"]])
    return bool(np.all(d[1:] <= 1.2 * d[:-1])), float(d[-1] / d[0])


# criteria ------------------------------------------------------------------------------------
def crit_1():
    rep, secs, _ = report("s1_gap")
    f = _fit(rep, "UV")
    ok = 0.85 <= f["slope_or_g"] <= 1.15 and f["r_squared"] >= 0.98 and secs <= 180
    return ok, f"S1 slope={f['slope_or_g']:.4f} r2={f['r_squared']:.4f} runtime={secs:.1f}s"


def crit_2():
    rep, secs, _ = report("s4_gap")
    f = _fit(rep, "UV")
    ok = 0.85 <= f["slope_or_g"] <= 1.15 and f["r_squared"] >= 0.98
    return ok, f"S4 slope={f['slope_or_g']:.4f} r2={f['r_squared']:.4f} runtime={secs:.1f}s"


def crit_3():
    r1, t1, _ = report("s1_superadiabatic")
    r5, t5, _ = report("s5_optimal")
    f1 = _fit(r1, "UV")
    f5 = _fit(r5, "UV")
    ok = (1.8 <= f1["slope_or_g"] <= 2.2 and f5["model"] == "exponential" and f5["r_squared"] >= 0.98
          and f5["slope_or_g"] > 0 and t1 + t5 <= 600)
    return ok, (f"S1 n=2 slope={f1['slope_or_g']:.4f}; S5 g={f5['slope_or_g']:.4f} r2={f5['r_squared']:.4f} "
                f"levels={list((r5.extra.get('levels') or {}).values())}; runtime={t1 + t5:.1f}s")


def crit_4():
    rep, _, _ = report("s1_superadiabatic")
    f = _fit(rep, "projection_drift")
    return 0.85 <= f["slope_or_g"] <= 1.15, f"S1 sup|P_eps - P| slope={f['slope_or_g']:.4f}"


def crit_5():
    parts, ok = [], True
    for name in ("s2_nogap", "s3_nogap", "s6_forms"):
        rep, secs, cfg = report(name)
        for kind in ("offdiag_1", "offdiag_2", "UV0_P0"):
            mono, ratio = _sweep_decays(rep, kind)
            ok &= mono and ratio < 0.25
        born = rep.sweep("bornemann")["samples"][-1][1]
        ok &= born < 0.05
        worst = max(_sweep_decays(rep, k)[1] for k in ("offdiag_1", "offdiag_2", "UV0_P0"))
        parts.append(f"{cfg.scenario_name}: worst final/initial={worst:.3f} bornemann={born:.2e}")
    return ok, "; ".join(parts)


def _random_clustered(rng):
    d = int(rng.integers(2, 9))
    # eigenvalues on a jittered lattice: pairwise distance >= 1
    cells = rng.choice(36, size=d, replace=False)
    ev = (cells % 6) * 1.5 + 1j * (cells // 6) * 1.5 + (rng.uniform(-0.2, 0.2, d) + 1j * rng.uniform(-0.2, 0.2, d))
    S = np.eye(d) + 0.3 * (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))) / np.sqrt(d)
    return S @ np.diag(ev) @ np.linalg.inv(S), ev


def crit_6():
    rng = np.random.default_rng(20240601)
    worst_cross = worst_assoc = 0.0
    for _ in range(50):
        A, ev = _random_clustered(rng)
        for lam in ev:
            P_r = riesz_projection(A, circle(lam, 0.5, nodes=64)).matrix
            P_w = weakly_associated_projection(A, lam, cross_check=False).matrix
            P_o = eigen_projection_oracle(A, lambda e, lam=lam: np.abs(e - lam) < 0.5)
            worst_cross = max(worst_cross, np.linalg.norm(P_r - P_w, 2), np.linalg.norm(P_r - P_o, 2))
            rep = verify_association(A, P_r, lam, "weakly_associated", tol=1e-9)
            worst_assoc = max(worst_assoc, rep.max_defect)
    ok = worst_cross <= 1e-9 and worst_assoc <= 1e-9
    return ok, f"50 matrices: max projection mismatch={worst_cross:.2e}, max association defect={worst_assoc:.2e}"


def crit_7():
    worst_res = worst_syl = 0.0
    for name in ("S1", "S4"):
        scn = load_scenario(name)
        for t in np.linspace(0, 1, 20):
            A = scn.family(t)
            Pp = scn.projection_curve.derivative([t])[0]
            cr = commutator_B(A, Pp, scn.contour(t))
            X = sylvester_commutator(A, cr.P, Pp @ cr.P - cr.P @ Pp)
            worst_res = max(worst_res, cr.residual)
            worst_syl = max(worst_syl, np.linalg.norm(cr.B - X, 2))
    return worst_res <= 1e-8 and worst_syl <= 1e-8, f"residual={worst_res:.2e} sylvester={worst_syl:.2e}"


def crit_8():
    worst_ratio, n = 0.0, 0
    for name in ("s1_gap", "s4_gap", "s1_superadiabatic", "s5_optimal", "s2_nogap", "s3_nogap", "s6_forms"):
        rep, _, _ = report(name)
        inv = [r for r in rep.invariants if r["check"].startswith("intertwining")]
        for r in inv:
            worst_ratio = max(worst_ratio, r["value"] / r["bound"])
            n += 1
    ppp = 0.0
    for key in list(CATALOG) + list(EXTRA):
        scn = load_scenario(key)
        for t in np.linspace(0, 1, 129):
            ppp = max(ppp, kato_generator(scn.projection_curve, t, return_defect=True)[1])
    ok = n > 0 and worst_ratio <= 1 and ppp <= 1e-10
    return ok, f"{n} (sweep, eps) pairs: max intertwining/(20 tol)={worst_ratio:.2e}; max PP'P={ppp:.2e}"


def crit_9():
    parts, ok = [], True
    for name in ("S1", "S4"):
        scn = load_scenario(name)
        tol = 1e-11
        U = build_propagator(scn.family, 2.0**-4, np.linspace(0, 1, 17), tol)
        V = perturbed_propagator(U, scn.kato, tol)
        b = float(np.max(np.linalg.norm(scn.kato(np.linspace(0, 1, 513)), 2, axis=(1, 2))))
        br = perturbation_bound_check(U, V, b, starts=(0.0, 0.25, 0.5, 0.75))
        W = perturbed_propagator(U, scn.kato, tol, method="series")
        gap = float(np.max(np.abs(W.from_start - V.from_start)))
        allowed = 20 * tol + W.series.term_norms[-1]
        ok &= br.holds(1e-6) and gap <= allowed
        parts.append(f"{name}: bound ratio={br.worst_ratio:.6f} series-direct={gap:.1e} (<= {allowed:.1e}, "
                     f"{W.series.terms} terms)")
    return ok, "; ".join(parts)


def crit_10():
    rep, _, cfg = report("s6_forms")
    unit = [r for r in rep.invariants if r["check"].startswith("kisynski_unitarity")]
    worst = max(r["value"] / r["bound"] for r in unit)
    fi = form_invariants(load_scenario("S6"), probes=20, seed=11)
    ok = len(unit) == len(cfg.epsilon_list) and worst <= 1 and fi["dual_resolvent_max"] <= 1e-10
    return ok, (f"unitarity/(20 tol) max={worst:.2e} over {len(unit)} eps; "
                f"dual resolvent defect={fi['dual_resolvent_max']:.2e}")


def crit_11():
    worst, n = 0.0, 0
    for key in list(CATALOG) + list(EXTRA):
        scn = load_scenario(key)
        spec = scn.to_spectral() if isinstance(scn, FormScenario) else scn
        for t in np.linspace(0, 1, 33):
            if any(abs(t - c) < 1e-9 for c in spec.crossing_set):
                continue
            rep = dual_projection_check(spec.family(t), spec.lam([t])[0], spec.projection_curve(t), tol=1e-8)
            if not rep.passed:
                return False, f"{key} t={t}: {rep.failures}"
            worst = max(worst, rep.max_defect)
            n += 1
    return True, f"{n} grid samples over {len(CATALOG) + len(EXTRA)} scenarios, max defect={worst:.2e}"


CRITERIA = {1: ("gap theorem rate", crit_1), 2: ("non-semisimple gap case", crit_2),
            3: ("higher-order rates", crit_3), 4: ("superadiabatic projection drift", crit_4),
            5: ("no-gap decay and Bornemann", crit_5), 6: ("projection oracle equivalence", crit_6),
            7: ("commutator equation", crit_7), 8: ("intertwining exactness", crit_8),
            9: ("perturbation bound and series", crit_9), 10: ("Kisynski unitarity", crit_10),
            11: ("dual projections", crit_11)}


def _line(k, ok, detail):
    return f"ACCEPTANCE {k:>2} [{'PASS' if ok else 'FAIL'}] {CRITERIA[k][0]}: {detail}"


@pytest.mark.parametrize("k", list(CRITERIA))
def test_acceptance(k, capsys):
    ok, detail = CRITERIA[k][1]()
    with capsys.disabled():
        print("\n" + _line(k, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    for k, (_, fn) in CRITERIA.items():
        print(_line(k, *fn()), flush=True)
