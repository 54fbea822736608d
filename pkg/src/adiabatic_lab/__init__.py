"""Numerical laboratory for adiabatic theorems of x' = (1/eps) A(t) x."""
from .kernels import BACKEND

__version__ = "0.1.0"

from .adiabatic import SpectralScenario, gap_harness, nogap_harness  # noqa: E402
from .config import ExperimentConfig, load_config  # noqa: E402
from .experiment import invariants_suite, run_experiment  # noqa: E402
from .forms import FormFamily, FormScenario  # noqa: E402
from .operator_family import OperatorFamily  # noqa: E402
from .report import emit_report, load_report  # noqa: E402
from .scenarios import list_scenarios, load_scenario  # noqa: E402
from .superadiabatic import superadiabatic_harness  # noqa: E402

__all__ = ["BACKEND", "__version__", "SpectralScenario", "gap_harness", "nogap_harness", "ExperimentConfig",
           "load_config", "invariants_suite", "run_experiment", "FormFamily", "FormScenario", "OperatorFamily",
           "emit_report", "load_report", "list_scenarios", "load_scenario", "superadiabatic_harness"]
