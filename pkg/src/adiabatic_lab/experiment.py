"""Run an ExperimentConfig: load the scenario, run the harness over the epsilon list, check assertions."""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from ._linalg import norm2
from .adiabatic import (FLOOR_FACTOR, HarnessResult, SpectralScenario, commutator_B, gap_harness, make_sweep,
                        nogap_harness, sylvester_commutator)
from .config import Assertion, ExperimentConfig
from .errors import ConfigError, ScenarioError
from .evolution import build_propagator, perturbation_bound_check, perturbed_propagator
from .forms import (FormScenario, delta_resolvent_probe, form_invariants, form_nogap_harness, kisynski_propagate)
from .report import Report
from .scenarios import load_scenario, validate_scenario
from .spectral import circle, dual_projection_check
from .superadiabatic import MAX_LEVELS, superadiabatic_harness

WORKERS_ENV = "ADIABATIC_LAB_WORKERS"


# invariants ----------------------------------------------------------------------------
def _row(check, value, bound, passed=None):
    value = float(value)
    return {"check": check, "value": value, "bound": float(bound),
            "passed": bool(value <= bound) if passed is None else bool(passed)}


def _away(ts, crossing_set, width=1e-9):
    mask = np.ones(len(ts), dtype=bool)
    for c in crossing_set:
        mask &= np.abs(ts - c) > width
    return mask


def invariants_suite(scn, grid_points: int = 33, seed: int = 7, tol: float = 1e-11) -> list:
    """Projection, association, commutator and boundedness checks for one scenario."""
    rows = []
    rep = validate_scenario(scn)
    rows.append(_row("load_validation", 0.0, 0.0, True))
    spec = scn.to_spectral() if isinstance(scn, FormScenario) else scn
    grid = np.linspace(0.0, 1.0, grid_points)
    A = spec.family.eval_many(grid)
    lam = spec.lam(grid)
    Pc = spec.projection_curve
    P = Pc.value(grid)
    Pd = Pc.derivative(grid)
    rows.append(_row("eigenvalue", rep.checks["eigenvalue"], 1e-8))
    rows.append(_row("association", rep.checks["association"], 1e-8))
    rows.append(_row("ppp_defect", float(np.max(norm2(P @ Pd @ P))), 1e-10))
    dual = 0.0
    for k in np.nonzero(_away(grid, spec.crossing_set))[0]:
        dual = max(dual, dual_projection_check(A[k], lam[k], P[k]).max_defect)
    rows.append(_row("dual_projection", dual, 1e-8))
    if spec.contour_radius is not None:
        res = syl = 0.0
        for k in range(0, grid_points, max(1, grid_points // 20)):
            gamma = circle(complex(lam[k]), spec.contour_radius)
            cr = commutator_B(A[k], Pd[k], gamma)
            X = sylvester_commutator(A[k], cr.P, Pd[k] @ cr.P - cr.P @ Pd[k])
            res = max(res, cr.residual)
            syl = max(syl, norm2(cr.B - X))
        rows.append(_row("commutator_residual", res, 1e-8))
        rows.append(_row("commutator_sylvester", syl, 1e-8))
    eps = 2.0**-4
    g = np.linspace(0.0, 1.0, 33)
    U = build_propagator(spec.family, eps, g, tol)
    # forms: the evolution is a contraction in the H-norm, not the Euclidean one
    unorm = scn.form.h_norm(U.from_start) if isinstance(scn, FormScenario) else norm2(U.from_start)
    rows.append(_row("sup_norm_U_vs_M", float(np.max(unorm)) / spec.M_bound, 1 + 1e-6))
    if spec.contour_radius is not None:
        V = perturbed_propagator(U, spec.kato, tol)
        b = float(np.max(norm2(spec.kato(np.linspace(0, 1, 257)))))
        br = perturbation_bound_check(U, V, b, starts=(0.0, 0.25, 0.5))
        rows.append(_row("perturbation_bound_ratio", br.worst_ratio, 1 + 1e-6))
    if isinstance(scn, FormScenario):
        fi = form_invariants(scn, seed=seed)
        rows.append(_row("form_self_adjointness", fi["self_adjointness"], 1e-10))
        rows.append(_row("dual_resolvent_identity", fi["dual_resolvent_max"], 1e-10))
        rows.append(_row("eigen_inclusion", fi["eigen_inclusion"], 1e-8))
        rows.append(_row("trace_formula_lambda", fi["trace_formula"], 1e-8))
        Uk = kisynski_propagate(scn.form, eps, g, tol)
        rows.append(_row("kisynski_unitarity", Uk.unitarity_defect, 20 * tol))
    return rows


# assertions ------------------------------------------------------------------------------
def default_assertions(scenario: str, harness: str, mode: str = "fixed_n", n: int = 2) -> list:
    """Acceptance checks attached to the built-in scenario/harness pairs."""
    A = Assertion
    if harness == "gap" and scenario in ("S1", "S4"):
        return [A("UV", slope_min=0.85, slope_max=1.15, r2_min=0.98, label=f"{scenario} gap rate")]
    if harness == "superadiabatic" and scenario == "S1" and mode == "fixed_n" and n == 2:
        return [A("UV", slope_min=1.8, slope_max=2.2, label="S1 second-order rate"),
                A("projection_drift", slope_min=0.85, slope_max=1.15, label="S1 projection drift")]
    if harness == "superadiabatic" and scenario == "S5" and mode == "optimal_truncation":
        return [A("UV", r2_min=0.98, g_min=0.0, label="S5 exponential rate")]
    if harness in ("nogap", "forms") and scenario in ("S2", "S3", "S6"):
        out = [A(k, monotone=1.2, final_ratio_max=0.25, label=f"{scenario} {k} decay")
               for k in ("UV0_P0", "offdiag_1", "offdiag_2")]
        out.append(A("bornemann", final_max=0.05, label=f"{scenario} Bornemann"))
        return out
    return []


def check_assertion(a: Assertion, sweeps: dict) -> dict:
    label = a.label or a.sweep
    if a.sweep not in sweeps:
        return {"label": label, "sweep": a.sweep, "passed": False, "detail": "sweep missing"}
    s = sweeps[a.sweep]
    problems = []
    fit = s.fit
    if any(v is not None for v in (a.slope_min, a.slope_max, a.r2_min, a.g_min)):
        if fit is None:
            problems.append(f"no fit ({s.note})")
        else:
            v = fit.slope_or_g
            if a.slope_min is not None and not v >= a.slope_min:
                problems.append(f"slope {v:.3f} < {a.slope_min}")
            if a.slope_max is not None and not v <= a.slope_max:
                problems.append(f"slope {v:.3f} > {a.slope_max}")
            if a.g_min is not None and not v > a.g_min:
                problems.append(f"g {v:.3f} <= {a.g_min}")
            if a.r2_min is not None and not fit.r_squared >= a.r2_min:
                problems.append(f"r2 {fit.r_squared:.4f} < {a.r2_min}")
    if len(s.samples) == 0:
        problems.append("no samples")
    else:
        if a.monotone is not None and not s.monotone_decrease(a.monotone):
            problems.append(f"not monotone up to factor {a.monotone}")
        if a.final_ratio_max is not None and not s.final_ratio() < a.final_ratio_max:
            problems.append(f"final/initial {s.final_ratio():.3f} >= {a.final_ratio_max}")
        if a.final_max is not None and not s.defects[-1] < a.final_max:
            problems.append(f"final {s.defects[-1]:.3e} >= {a.final_max}")
    if problems:
        detail = "; ".join(problems)
    else:
        parts = [f"slope_or_g={fit.slope_or_g:.4f} r2={fit.r_squared:.4f}"] if fit else []
        if a.final_ratio_max is not None:
            parts.append(f"final/initial={s.final_ratio():.3f}")
        if a.final_max is not None:
            parts.append(f"final={s.defects[-1]:.3e}")
        detail = " ".join(parts)
    return {"label": label, "sweep": a.sweep, "passed": not problems, "detail": detail}


# harness dispatch ------------------------------------------------------------------------------
def _as_spectral(scn) -> SpectralScenario:
    return scn.to_spectral() if isinstance(scn, FormScenario) else scn


def _run_harness(cfg: ExperimentConfig, scn, eps_list) -> HarnessResult:
    h = cfg.harness
    if h == "gap":
        if isinstance(scn, FormScenario):
            raise ConfigError("the gap harness needs a spectral scenario")
        return gap_harness(scn, eps_list, cfg.grid_points, cfg.tol)
    if h == "nogap":
        if isinstance(scn, FormScenario):
            return form_nogap_harness(scn, eps_list, cfg.grid_points, cfg.tol, seed=cfg.seed)
        return nogap_harness(scn, eps_list, cfg.grid_points, cfg.tol, seed=cfg.seed)
    if h == "superadiabatic":
        return superadiabatic_harness(_as_spectral(scn), eps_list, cfg.mode, cfg.fixed_n, cfg.grid_points, cfg.tol,
                                      cap=cfg.levels or MAX_LEVELS)
    if h == "forms":
        if not isinstance(scn, FormScenario):
            raise ConfigError("the forms harness needs a form scenario (e.g. S6)")
        res = form_nogap_harness(scn, eps_list, cfg.grid_points, cfg.tol, seed=cfg.seed)
        grid = np.linspace(0.0, 1.0, cfg.grid_points)
        unit = {}
        for e in eps_list:
            if e in res.failures:
                continue
            tl = res.tolerances.get(e, cfg.tol)
            unit[repr(e)] = kisynski_propagate(scn.form, e, grid, tl).unitarity_defect
        res.invariants["kisynski_unitarity"] = unit
        res.invariants["kisynski_bound"] = {k: 20 * res.tolerances[float(k)] for k in unit}
        return res
    raise ConfigError(f"harness {h!r} has no sweep")


def _worker(args):
    cfg_dict, eps = args
    cfg = ExperimentConfig(**{k: v for k, v in cfg_dict.items() if k != "assertions"})
    scn = load_scenario(cfg.scenario, validate=False)
    return eps, _run_harness(cfg, scn, [eps])


def _merge(results: list, cfg: ExperimentConfig) -> HarnessResult:
    """Combine single-epsilon harness results (in decreasing epsilon order) and refit."""
    results = sorted(results, key=lambda r: -r[0])
    first = results[0][1]
    kinds = list(first.sweeps)
    sweeps = {}
    tols, fails, timings, inv = {}, {}, {"total_s": 0.0}, {}
    for _, r in results:
        tols.update(r.tolerances)
        fails.update(r.failures)
        timings["total_s"] += r.timings.get("total_s", 0.0)
        for k, v in r.invariants.items():
            if isinstance(v, dict):
                inv.setdefault(k, {}).update(v)
            elif isinstance(v, (int, float)) and not isinstance(v, bool):
                inv[k] = max(inv.get(k, v), v)
            else:
                inv[k] = v
    model = "exponential" if cfg.harness == "superadiabatic" and cfg.mode == "optimal_truncation" else "power"
    for kind in kinds:
        samples, floors = [], []
        for _, r in results:
            s = r.sweeps[kind]
            samples += s.samples
            floors += s.floors
        fit = not (kind == "projection_drift" and cfg.mode == "fixed_n" and cfg.fixed_n == 0)
        sweeps[kind] = make_sweep(first.scenario_id, kind, samples, floors, model if kind != "projection_drift"
                                  else "power", first.sweeps[kind].harness, fit)
    return HarnessResult(first.scenario_id, first.harness, sweeps, inv, timings, tols, first.seed, fails)


def worker_count(explicit: Optional[int] = None) -> int:
    if explicit is not None:
        return max(1, int(explicit))
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc


def _invariant_rows_from_harness(res: HarnessResult) -> list:
    rows = []
    inv = res.invariants
    if "intertwining" in inv:
        for k, v in inv["intertwining"].items():
            rows.append(_row(f"intertwining[eps={k}]", v, inv["intertwining_bound"][k]))
    if "ppp_defect" in inv:
        rows.append(_row("ppp_defect", inv["ppp_defect"], 1e-10))
    if "kisynski_unitarity" in inv:
        for k, v in inv["kisynski_unitarity"].items():
            rows.append(_row(f"kisynski_unitarity[eps={k}]", v, inv["kisynski_bound"][k]))
    if "v0_bound_ratio" in inv:
        for k, v in inv["v0_bound_ratio"].items():
            rows.append(_row(f"v0_bound[eps={k}]", v, 1 + 1e-6))
    return rows


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> Report:
    """Execute the configured harness; per-epsilon failures are recorded, not raised."""
    cfg.validate()
    t0 = time.perf_counter()
    scn = load_scenario(cfg.scenario)
    t_load = time.perf_counter() - t0
    extra = {}
    if cfg.harness == "invariants":
        rows = invariants_suite(scn, seed=cfg.seed, tol=cfg.tol)
        asserts = [{"label": f"invariant {r['check']}", "sweep": "", "passed": r["passed"],
                    "detail": f"{r['value']:.3e} <= {r['bound']:.1e}"} for r in rows]
        return Report(cfg.to_dict(), [], rows, asserts, {"load_s": t_load, "total_s": time.perf_counter() - t0},
                      {}, {}, cfg.seed)
    eps_list = cfg.epsilon_list or list(scn.default_epsilons)
    n_workers = worker_count(workers)
    fan_out = n_workers > 1 and len(eps_list) > 1 and not (
        cfg.harness == "superadiabatic" and cfg.mode == "optimal_truncation")
    if fan_out:
        cfg_dict = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(_worker, [(cfg_dict, e) for e in eps_list]))
        res = _merge(parts, cfg)
    else:
        res = _run_harness(cfg, scn, eps_list)
    if cfg.harness == "forms":
        probe = delta_resolvent_probe(scn.form, scn.lambda_curve, scn.projection_curve,
                                      [1.0, 0.3, 0.1, 0.03, 0.01, 0.003])
        extra["delta_probe"] = {"deltas": probe.deltas, "resolvent_sup": probe.resolvent_sup,
                                "derivative_sup": probe.derivative_sup,
                                "resolvent_exponent": probe.resolvent_exponent,
                                "derivative_exponent": probe.derivative_exponent}
        extra["form_invariants"] = form_invariants(scn, seed=cfg.seed)
    for k in ("levels", "constants", "level_diffs", "state_defects", "mode", "method"):
        if k in res.invariants:
            extra[k] = res.invariants[k]
    rows = _invariant_rows_from_harness(res)
    if "delta_probe" in extra:
        rows.append(_row("delta_resolvent_exponent", extra["delta_probe"]["resolvent_exponent"], 1.1))
        rows.append(_row("delta_derivative_exponent", extra["delta_probe"]["derivative_exponent"], 2.1))
    assertions = list(cfg.assertions)
    if cfg.default_assertions:
        assertions = default_assertions(cfg.scenario_name, cfg.harness, cfg.mode, cfg.fixed_n) + assertions
    checked = [check_assertion(a, res.sweeps) for a in assertions]
    checked += [{"label": f"invariant {r['check']}", "sweep": "", "passed": r["passed"],
                 "detail": f"{r['value']:.3e} <= {r['bound']:.1e}"} for r in rows]
    floors = {k: s.integrator_floor for k, s in res.sweeps.items()}
    timings = {"load_s": t_load, "harness_s": res.timings.get("total_s", 0.0),
               "total_s": time.perf_counter() - t0, "workers": n_workers if fan_out else 1}
    extra["tolerances"] = {repr(k): v for k, v in res.tolerances.items()}
    return Report(cfg.to_dict(), [s.to_dict() for s in res.sweeps.values()], rows, checked, timings, floors,
                  {repr(k): v for k, v in res.failures.items()}, cfg.seed, extra)
