"""Exceptions shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
solver failures exit 3, and violated runtime assertions exit 4.
"""


class FlowbeamError(Exception):
    """Base class for package errors."""


class ConfigurationError(FlowbeamError):
    """Invalid parameters, grids, or config files."""


class ShapeError(ConfigurationError):
    """Mismatched grid or array shapes."""


class UsageError(FlowbeamError):
    """An operation was called without data it needs."""


class SolverFailure(FlowbeamError):
    """An iterative or direct solve did not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class StepFailure(SolverFailure):
    """A time step could not be completed (divergence, NaN, CFL)."""


class ContractionFailure(SolverFailure):
    """Fixed-point iteration is not contractive on the requested window."""

    def __init__(self, message, q_estimate=None, iterations=None):
        super().__init__(message, iterations=iterations)
        self.q_estimate = q_estimate


class AssertionFailure(FlowbeamError):
    """A runtime invariant check failed (CLI exit code 4)."""
