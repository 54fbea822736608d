import csv
import json
import math
import os

import numpy as np
import pytest

from adiabatic_lab.cli import main
from adiabatic_lab.config import ExperimentConfig, config_from_dict, load_config
from adiabatic_lab.errors import ConfigError, ScenarioError
from adiabatic_lab.evolution import build_propagator
from adiabatic_lab.experiment import invariants_suite, run_experiment
from adiabatic_lab.report import CSV_COLUMNS, emit_report, load_report
from adiabatic_lab.scenarios import CATALOG, list_scenarios, load_scenario, validate_scenario
from adiabatic_lab.spectral import nilpotency_order

HERE = os.path.dirname(__file__)
CONFIGS = os.path.join(HERE, "..", "configs")
EPS5 = [2.0**-k for k in range(3, 8)]

SPIN = {"name": "spin", "contour_radius": 0.05,
        "terms": [{"coef": {"cos": [1, 2, 0]}, "matrix": [[[0, -1], 0], [0, [0, 1]]]},
                  {"coef": {"sin": [1, 2, 0]}, "matrix": [[0, [0, -1]], [[0, -1], 0]]}],
        "lambda": [{"coef": {"poly": [[0, -1]]}}]}


# scenarios -----------------------------------------------------------------------------
def test_catalog_ids_and_aliases():
    assert [k for k, _ in list_scenarios()] == ["S1", "S2", "S3", "S4", "S5", "S6"]
    assert load_scenario("gap_uniform_2level").name == load_scenario("S1").name


def test_s1_shape_and_gap():
    s = load_scenario("S1")
    assert s.dim == 2 and s.gap_class == "uniform"
    ts = np.linspace(0, 1, 201)
    A = s.family.eval_many(ts)
    assert np.max(np.abs(A + np.conj(np.swapaxes(A, 1, 2)))) <= 1e-14  # skew-adjoint
    ev = np.linalg.eigvals(A)
    assert np.min(np.abs(ev[:, 0] - ev[:, 1])) >= 1.0


def test_s4_jordan_dissipative():
    s = load_scenario("S4")
    assert s.dim == 3 and s.m0 == 2 and s.gap_class == "uniform"
    for t in (0.0, 0.5, 1.0):
        A = s.family(t)
        lam = s.lam([t])[0]
        assert lam.real < 0 and nilpotency_order(A, lam) == 2
    U = build_propagator(s.family, 2.0**-6, np.linspace(0, 1, 17), 1e-11)
    assert np.max(np.linalg.norm(U.from_start, 2, axis=(1, 2))) <= s.M_bound * (1 + 1e-9)


def test_inline_lambda_not_eigenvalue():
    bad = dict(SPIN, **{"lambda": [{"coef": {"poly": [[0, -1.5]]}}]})
    with pytest.raises(ScenarioError) as info:
        load_scenario(bad)
    assert info.value.check == "eigenvalue"


def test_inline_syntax_errors():
    with pytest.raises(ScenarioError):
        load_scenario({"terms": [{"coef": {"exp": [1]}, "matrix": [[1]]}], "lambda": []})
    with pytest.raises(ScenarioError):
        load_scenario("S9")


@pytest.mark.parametrize("name", list(CATALOG) + ["frozen", "constant"])
def test_every_builtin_passes_invariants(name):
    scn = load_scenario(name)
    validate_scenario(scn)
    rows = invariants_suite(scn)
    assert all(r["passed"] for r in rows), [r for r in rows if not r["passed"]]


# config --------------------------------------------------------------------------------
@pytest.mark.parametrize("patch, msg", [
    ({"epsilon_list": []}, "empty"),
    ({"epsilon_list": [0.1, 0.2]}, "decreasing"),
    ({"epsilon_list": [1.5, 0.1]}, "(0, 1)"),
    ({"grid_points": 17}, "grid_points"),
    ({"harness": "superadiabatic", "tol": 1e-6}, "floor rule"),
    ({"output": {"formats": ["xml"]}}, "formats"),
    ({"schema_version": 7}, "schema_version"),
    ({"colour": "red"}, "unknown config keys"),
])
def test_config_errors(patch, msg):
    raw = {"scenario": "S1", "harness": "gap", "epsilon_list": EPS5}
    raw.update(patch)
    with pytest.raises(ConfigError, match=msg.replace("(", r"\(").replace(")", r"\)")):
        config_from_dict(raw)


@pytest.mark.parametrize("path", sorted(f for f in os.listdir(CONFIGS) if f.endswith(".toml")))
def test_shipped_configs_parse(path):
    cfg = load_config(os.path.join(CONFIGS, path))
    assert cfg.schema_version == 1


# experiment and report -------------------------------------------------------------------
@pytest.fixture(scope="module")
def s1_report():
    return run_experiment(ExperimentConfig("S1", "gap", EPS5, 33))


def test_run_experiment_s1_gap(s1_report):
    fit = s1_report.sweep("UV")["fit"]
    assert 0.85 <= fit["slope_or_g"] <= 1.15 and "excluded" in fit and "r_squared" in fit
    assert s1_report.passed
    assert s1_report.version["kernels"] in ("compiled", "python")
    assert s1_report.seed == 1234


def test_determinism_and_fan_out(s1_report, monkeypatch):
    again = run_experiment(ExperimentConfig("S1", "gap", EPS5, 33))
    assert again.sweeps == s1_report.sweeps
    par = run_experiment(ExperimentConfig("S1", "gap", EPS5, 33), workers=2)
    assert par.timings["workers"] == 2
    assert [s["samples"] for s in par.sweeps] == [s["samples"] for s in s1_report.sweeps]


def test_per_epsilon_failures_are_recorded():
    rep = run_experiment(ExperimentConfig(SPIN, "superadiabatic", [0.9, 0.5, 0.25, 0.125, 0.0625, 0.03125], 33,
                                          1e-13, fixed_n=2))
    assert set(rep.failures) == {"0.9", "0.5"}
    assert len(rep.sweep("projection_drift")["samples"]) == 4


def test_csv_rows_and_columns(s1_report, tmp_path):
    emit_report(s1_report, tmp_path, ("csv",))
    with open(tmp_path / "report.csv") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    assert reader.fieldnames == CSV_COLUMNS
    assert len(rows) == sum(len(s["samples"]) for s in s1_report.sweeps)


def test_json_round_trip_bitwise(s1_report, tmp_path):
    emit_report(s1_report, tmp_path, ("json",))
    back = load_report(tmp_path / "report.json")
    for a, b in zip(s1_report.sweeps, back.sweeps):
        assert [tuple(x) for x in a["samples"]] == [tuple(x) for x in b["samples"]]
    assert back.schema_version == 1


def test_plotdata_axes(tmp_path):
    rep = run_experiment(ExperimentConfig("S5", "superadiabatic", [1 / k for k in range(32, 64, 4)], 33, 1e-13,
                                          mode="optimal_truncation"))
    emit_report(rep, tmp_path, ("plotdata",))
    side = json.loads((tmp_path / "report_S5_superadiabatic_UV.fit.json").read_text())
    xy = np.loadtxt(tmp_path / "report_S5_superadiabatic_UV.dat")
    assert side["x"] == "1/epsilon"
    assert np.allclose(xy[:, 0], [1 / e for e, _ in rep.sweep("UV")["samples"]])
    side = json.loads((tmp_path / "report_S5_superadiabatic_projection_drift.fit.json").read_text())
    xy = np.loadtxt(tmp_path / "report_S5_superadiabatic_projection_drift.dat")
    assert side["x"] == "log10(epsilon)"
    assert np.allclose(xy[:, 0], [math.log10(e) for e, _ in rep.sweep("projection_drift")["samples"]])
    line = side["line"]
    assert np.allclose(line["slope"] * xy[:, 0] + line["intercept"], xy[:, 1], atol=0.1)


def test_output_path_is_a_file(s1_report, tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    with pytest.raises(OSError):
        emit_report(s1_report, f, ("json",))


# CLI ---------------------------------------------------------------------------------
def _write(tmp_path, text):
    p = tmp_path / "cfg.toml"
    p.write_text(text)
    return str(p)


def test_cli_list_and_invariants(capsys):
    assert main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    assert "S4" in out and "jordan_dissipative" in out
    assert main(["invariants", "S1"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_cli_run_check_and_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, 'scenario = "S1"\nharness = "gap"\nepsilon_list = [0.125, 0.0625, 0.03125, 0.015625]\n'
                            'grid_points = 33\n')
    assert main(["check", good]) == 0
    assert main(["run", good, "--output", str(tmp_path / "o"), "--format", "csv"]) == 0
    assert (tmp_path / "o" / "report.csv").exists() and not (tmp_path / "o" / "report.json").exists()
    # an acceptance-tagged assertion that cannot hold
    failing = good.replace("cfg.toml", "cfg2.toml")
    with open(failing, "w") as fh:
        fh.write(open(good).read() + '\n[[assert]]\nsweep = "UV"\nslope_min = 1.9\nlabel = "too steep"\n')
    assert main(["run", failing, "--output", str(tmp_path / "o2")]) == 1
    assert "[FAIL] too steep" in capsys.readouterr().out
    assert main(["run", good, "--epsilon-list", "0.1,0.2"]) == 2
    assert main(["check", _write(tmp_path, 'scenario = "S1"\nharness = "warp"\n')]) == 2
    assert main(["check", str(tmp_path / "missing.toml")]) == 2


def test_cli_overrides_apply(tmp_path):
    good = _write(tmp_path, 'scenario = "S1"\nharness = "gap"\nepsilon_list = [0.125, 0.0625]\n')
    out = tmp_path / "o"
    assert main(["run", good, "--epsilon-list", "0.125,0.0625,0.03125,0.015625", "--grid-points", "33",
                 "--tol", "1e-10", "--output", str(out), "--format", "json"]) == 0
    rep = load_report(out / "report.json")
    assert rep.config["grid_points"] == 33 and rep.config["tol"] == 1e-10
    assert len(rep.sweep("UV")["samples"]) == 4
