"""Exception types shared across the package."""


class AdiabaticLabError(Exception):
    """Base class for all package errors."""


class DomainError(AdiabaticLabError, ValueError):
    """Argument outside the domain of an operation (e.g. t outside [0, 1])."""


class CapabilityError(AdiabaticLabError):
    """The object cannot provide what was asked (derivative order, gap, ...)."""


class NearSingularityError(AdiabaticLabError, ArithmeticError):
    """A linear solve was attempted too close to the spectrum."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class RayViolationError(NearSingularityError):
    """lambda + delta*exp(i*theta) hit the spectrum for one of the requested deltas."""

    def __init__(self, message, delta, residual=float("nan")):
        super().__init__(message, residual)
        self.delta = delta


class ContourError(AdiabaticLabError):
    """Contour passes through (or too close to) the spectrum."""


class QuadratureError(AdiabaticLabError):
    """Contour quadrature did not converge within the node budget."""


class NotSpectralValueError(AdiabaticLabError, ValueError):
    """The requested lambda is not an eigenvalue within tolerance."""


class ResourceError(AdiabaticLabError):
    """A numerical budget (steps, terms, levels) was exhausted."""


class SeriesDivergenceError(ResourceError):
    """Perturbation series failed to converge within the term budget."""


class UsageError(AdiabaticLabError):
    """Inconsistent combination of inputs (e.g. propagators with different epsilon)."""


class ConditioningError(AdiabaticLabError):
    """A Gram matrix or basis is too ill-conditioned to trust."""


class UnderdeterminedFitError(AdiabaticLabError):
    """Too few usable samples for a rate fit."""


class ScenarioError(AdiabaticLabError):
    """Scenario failed a load-time invariant; ``check`` names the failing test."""

    def __init__(self, message, check=""):
        super().__init__(message)
        self.check = check


class ConfigError(AdiabaticLabError, ValueError):
    """Invalid experiment configuration."""
