"""Experiment configuration: a TOML file (or a dict) validated into ExperimentConfig."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError

SCHEMA_VERSION = 1
HARNESSES = ("gap", "nogap", "superadiabatic", "forms", "invariants")
FORMATS = ("json", "csv", "plotdata")


@dataclass
class Assertion:
    """An acceptance-tagged check on one sweep of the report."""

    sweep: str
    slope_min: Optional[float] = None
    slope_max: Optional[float] = None
    r2_min: Optional[float] = None
    g_min: Optional[float] = None  # exponential fits: g strictly above this
    monotone: Optional[float] = None  # d_{k+1} <= factor * d_k
    final_ratio_max: Optional[float] = None  # last / first strictly below
    final_max: Optional[float] = None  # last defect strictly below
    label: str = ""


@dataclass
class ExperimentConfig:
    scenario: Union[str, dict]
    harness: str
    epsilon_list: Optional[list] = None
    grid_points: int = 65
    tol: float = 1e-11
    mode: str = "fixed_n"
    fixed_n: int = 2
    levels: Optional[int] = None  # cap for optimal truncation
    seed: int = 1234
    output_dir: Optional[str] = None
    formats: list = field(default_factory=lambda: list(FORMATS))
    assertions: list = field(default_factory=list)
    default_assertions: bool = True
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def scenario_name(self) -> str:
        return self.scenario if isinstance(self.scenario, str) else str(self.scenario.get("name", "inline"))

    @property
    def second_order(self) -> bool:
        return self.harness == "superadiabatic" and (self.mode == "optimal_truncation" or self.fixed_n >= 2)

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if self.harness not in HARNESSES:
            raise ConfigError(f"harness must be one of {HARNESSES}, got {self.harness!r}")
        if not isinstance(self.scenario, (str, dict)) or not self.scenario:
            raise ConfigError("scenario must be a built-in name or an inline table")
        if self.epsilon_list is not None:
            eps = self.epsilon_list
            if len(eps) == 0:
                raise ConfigError("epsilon_list is empty")
            try:
                eps = [float(e) for e in eps]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"epsilon_list must hold numbers: {exc}") from exc
            if any(not 0 < e < 1 for e in eps):
                raise ConfigError("every epsilon must lie in (0, 1)")
            if any(b >= a for a, b in zip(eps, eps[1:])):
                raise ConfigError("epsilon_list must be strictly decreasing")
            self.epsilon_list = eps
        if not isinstance(self.grid_points, int) or self.grid_points < 33:
            raise ConfigError("grid_points must be an integer >= 33")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.second_order and self.epsilon_list:
            bound = min(self.epsilon_list) ** 2 * 1e-2
            if self.tol > bound:
                raise ConfigError(f"tol {self.tol:g} above the floor rule min(eps)^2 * 1e-2 = {bound:g}")
        if self.mode not in ("fixed_n", "optimal_truncation"):
            raise ConfigError("mode must be fixed_n or optimal_truncation")
        if self.fixed_n < 0 or (self.levels is not None and self.levels < 1):
            raise ConfigError("fixed_n must be >= 0 and levels >= 1")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown output formats {bad}; choose from {FORMATS}")
        return self


def _assertions(raw) -> list:
    out = []
    for item in raw or []:
        if not isinstance(item, dict) or "sweep" not in item:
            raise ConfigError(f"each [[assert]] entry needs a 'sweep' key, got {item!r}")
        try:
            out.append(Assertion(**item))
        except TypeError as exc:
            raise ConfigError(f"bad assertion {item!r}: {exc}") from exc
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    known = {"scenario", "harness", "epsilon_list", "grid_points", "tol", "mode", "fixed_n", "levels", "seed",
             "output", "assert", "default_assertions", "schema_version"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    if "scenario" not in raw or "harness" not in raw:
        raise ConfigError("config needs 'scenario' and 'harness'")
    out = raw.get("output", {}) or {}
    cfg = ExperimentConfig(
        scenario=raw["scenario"], harness=raw["harness"], epsilon_list=raw.get("epsilon_list"),
        grid_points=raw.get("grid_points", 65), tol=float(raw.get("tol", 1e-11)),
        mode=raw.get("mode", "fixed_n"), fixed_n=int(raw.get("fixed_n", 2)), levels=raw.get("levels"),
        seed=int(raw.get("seed", 1234)), output_dir=out.get("dir"),
        formats=list(out.get("formats", FORMATS)), assertions=_assertions(raw.get("assert")),
        default_assertions=bool(raw.get("default_assertions", True)),
        schema_version=int(raw.get("schema_version", SCHEMA_VERSION)))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        with p.open("rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return config_from_dict(raw)
