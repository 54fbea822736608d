"""Command line entry point: ``adiabatic-lab run|list-scenarios|check|invariants``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import FORMATS, ExperimentConfig, load_config
from .errors import AdiabaticLabError, ConfigError, ScenarioError
from .experiment import run_experiment
from .report import emit_report
from .scenarios import list_scenarios, load_scenario

log = logging.getLogger("adiabatic_lab")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG = 0, 1, 2


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad epsilon list {text!r}") from exc


def _add_overrides(p):
    p.add_argument("--epsilon-list", type=_float_list, help="comma separated, strictly decreasing")
    p.add_argument("--grid-points", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--output", help="output directory")
    p.add_argument("--format", action="append", choices=FORMATS, help="repeatable; default all")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.epsilon_list is not None:
        cfg.epsilon_list = args.epsilon_list
    if args.grid_points is not None:
        cfg.grid_points = args.grid_points
    if args.tol is not None:
        cfg.tol = args.tol
    if args.output is not None:
        cfg.output_dir = args.output
    if args.format:
        cfg.formats = list(args.format)
    return cfg.validate()


def _print_summary(report) -> None:
    for s in report.sweeps:
        fit = s.get("fit")
        tail = (f"{fit['model']} {fit['slope_or_g']:.4f} r2={fit['r_squared']:.4f} excluded={len(fit['excluded'])}"
                if fit else s.get("note") or "no fit")
        print(f"  {s['defect_kind']:<18} n={len(s['samples']):<3} {tail}")
    for a in report.assertions:
        print(f"  [{'PASS' if a['passed'] else 'FAIL'}] {a['label']}: {a['detail']}")
    if report.failures:
        for eps, msg in report.failures.items():
            print(f"  eps={eps} failed: {msg}")


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    report = run_experiment(cfg)
    outdir = cfg.output_dir or (Path(args.config).parent / "out")
    written = emit_report(report, outdir, cfg.formats)
    print(f"{cfg.scenario_name} / {cfg.harness}: {'passed' if report.passed else 'FAILED'}"
          f" ({report.timings['total_s']:.1f} s)")
    _print_summary(report)
    for p in written:
        log.info("wrote %s", p)
    return EXIT_OK if report.passed else EXIT_ASSERT


def cmd_check(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    rep_scn = load_scenario(cfg.scenario)
    print(f"config ok: scenario {cfg.scenario_name} ({rep_scn.name}), harness {cfg.harness}")
    return EXIT_OK


def cmd_list(args) -> int:
    for key, alias in list_scenarios():
        scn = load_scenario(key, validate=False)
        spec = scn.to_spectral() if hasattr(scn, "to_spectral") else scn
        print(f"{key:<9} {alias:<20} dim={spec.dim:<3} gap={spec.gap_class:<10} {spec.description}")
    return EXIT_OK


def cmd_invariants(args) -> int:
    cfg = ExperimentConfig(scenario=args.scenario, harness="invariants", seed=args.seed)
    if args.output:
        cfg.output_dir = args.output
    report = run_experiment(cfg)
    for r in report.invariants:
        print(f"  [{'PASS' if r['passed'] else 'FAIL'}] {r['check']:<28} {r['value']:.3e} (bound {r['bound']:.1e})")
    if args.output:
        emit_report(report, args.output, ("json",), stem=f"invariants_{args.scenario}")
    if args.json:
        print(json.dumps(report.invariants))
    return EXIT_OK if report.passed else EXIT_ASSERT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adiabatic-lab", description="Adiabatic-theorem rate experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    _add_overrides(r)
    r.set_defaults(fn=cmd_run)
    c = sub.add_parser("check", help="validate a config and its scenario without running")
    c.add_argument("config")
    _add_overrides(c)
    c.set_defaults(fn=cmd_check)
    ls = sub.add_parser("list-scenarios", help="list built-in scenarios")
    ls.set_defaults(fn=cmd_list)
    inv = sub.add_parser("invariants", help="run the invariant suite on one scenario")
    inv.add_argument("scenario")
    inv.add_argument("--seed", type=int, default=7)
    inv.add_argument("--output")
    inv.add_argument("--json", action="store_true")
    inv.set_defaults(fn=cmd_invariants)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AdiabaticLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
