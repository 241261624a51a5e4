"""
errors.py

Exception hierarchy shared by every service module.

The CLI maps these onto exit codes:
- configuration / usage / assumption problems -> 2
- numerical and assembly failures             -> 3
"""


class UcwaveError(Exception):
    """Base class for all errors raised by ucwave."""


class ConfigurationError(UcwaveError, ValueError):
    """Invalid configuration or derived parameters."""


class UsageError(UcwaveError, ValueError):
    """An operation was called outside of its domain of definition."""


class AssumptionError(UcwaveError):
    """A structural assumption of the method (e.g. (A1)) does not hold."""


class AssemblyError(UcwaveError):
    """Spaces, mesh or data passed to an assembler do not fit together."""


class NumericalError(UcwaveError):
    """Base class for failures of the linear algebra."""


class FactorizationError(NumericalError):
    """A slab block of the saddle system is numerically singular."""

    def __init__(self, message: str, slab: int):
        super().__init__(message)
        self.slab = slab


class SolverQualityError(NumericalError):
    """The residual after iterative refinement is still too large."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class EigenConvergenceError(NumericalError):
    """The shift-invert iteration did not converge."""

    def __init__(self, message: str, rayleigh_quotient: float, residual: float):
        super().__init__(message)
        self.rayleigh_quotient = rayleigh_quotient
        self.residual = residual


class NoiseError(NumericalError):
    """A noise shape vanishes on the data set and cannot be normalised."""
