"""Report assembly and emission (json, csv, plotdata)."""
from __future__ import annotations

import csv
import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION

CSV_COLUMNS = ["scenario", "harness", "defect_kind", "epsilon", "sup_defect", "floor"]


def version_stamp() -> dict:
    import scipy

    from . import __version__
    from .kernels import BACKEND

    return {"adiabatic_lab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "kernels": BACKEND}


@dataclass
class Report:
    config: dict
    sweeps: list  # SweepResult.to_dict() records
    invariants: list  # rows {check, value, bound, passed}
    assertions: list  # rows {label, sweep, passed, detail}
    timings: dict
    floors: dict
    failures: dict
    seed: int
    extra: dict = field(default_factory=dict)
    version: dict = field(default_factory=version_stamp)
    schema_version: int = SCHEMA_VERSION

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.assertions)

    def sweep(self, kind: str) -> dict:
        for s in self.sweeps:
            if s["defect_kind"] == kind:
                return s
        raise KeyError(kind)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "config": self.config, "sweeps": self.sweeps,
                "invariants": self.invariants, "assertions": self.assertions, "timings": self.timings,
                "floors": self.floors, "failures": self.failures, "seed": self.seed, "extra": self.extra,
                "version": self.version, "passed": self.passed}

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(d["config"], d["sweeps"], d["invariants"], d["assertions"], d["timings"], d["floors"],
                   d["failures"], d["seed"], d.get("extra", {}), d.get("version", {}),
                   d.get("schema_version", SCHEMA_VERSION))


def _clean(obj):
    """Make numpy scalars and non-finite floats JSON-safe (floats keep their exact repr)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def csv_rows(report: Report) -> list:
    rows = []
    for s in report.sweeps:
        floors = s.get("floors") or [s["integrator_floor"]] * len(s["samples"])
        for (eps, dfc), fl in zip(s["samples"], floors):
            rows.append({"scenario": s["scenario_id"], "harness": s["harness"], "defect_kind": s["defect_kind"],
                         "epsilon": repr(float(eps)), "sup_defect": repr(float(dfc)), "floor": repr(float(fl))})
    return rows


def plot_series(sweep: dict):
    """(x, y) arrays and line parameters in the plotted axes: y = log10 defect,
    x = log10 eps for power fits and 1/eps for exponential fits."""
    fit = sweep.get("fit")
    if not fit:
        return None
    eps = np.array([s[0] for s in sweep["samples"]])
    dfc = np.array([s[1] for s in sweep["samples"]])
    keep = dfc > 0
    ln10 = math.log(10)
    if fit["model"] == "power":
        x = np.log10(eps[keep])
        line = {"slope": fit["slope_or_g"], "intercept": fit["intercept"] / ln10}
        xlabel = "log10(epsilon)"
    else:
        x = 1.0 / eps[keep]
        line = {"slope": -fit["slope_or_g"] / ln10, "intercept": fit["intercept"] / ln10}
        xlabel = "1/epsilon"
    return x, np.log10(dfc[keep]), line, xlabel


def emit_report(report: Report, outdir, formats=("json", "csv", "plotdata"), stem: str = "report") -> list:
    """Write the requested formats into ``outdir``; returns the written paths."""
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    if "json" in formats:
        p = out / f"{stem}.json"
        p.write_text(json.dumps(_clean(report.to_dict()), indent=1))
        written.append(p)
    if "csv" in formats:
        p = out / f"{stem}.csv"
        with p.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            w.writerows(csv_rows(report))
        written.append(p)
    if "plotdata" in formats:
        for s in report.sweeps:
            series = plot_series(s)
            if series is None:
                continue
            x, y, line, xlabel = series
            base = out / f"{stem}_{s['scenario_id']}_{s['harness']}_{s['defect_kind']}"
            np.savetxt(base.with_suffix(".dat"), np.column_stack([x, y]), header=f"{xlabel} log10(defect)")
            side = {"model": s["fit"]["model"], "x": xlabel, "y": "log10(defect)", "line": line,
                    "natural_log_fit": s["fit"], "excluded": s["fit"]["excluded"]}
            base.with_suffix(".fit.json").write_text(json.dumps(_clean(side), indent=1))
            written += [base.with_suffix(".dat"), base.with_suffix(".fit.json")]
    return written


def load_report(path) -> Report:
    return Report.from_dict(json.loads(Path(path).read_text()))
