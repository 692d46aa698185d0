"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have incompatible dimensions."""


class DegenerateZonotopeError(RuntimeError):
    """The zonotope has no full-dimensional facet description."""


class LpInfeasibleError(RuntimeError):
    """Linear program has no feasible point."""


class LpUnboundedError(RuntimeError):
    """Linear program is unbounded below."""


class NoFeasiblePointError(RuntimeError):
    """Derivative-free search found no feasible point within budget."""


class NonConvergenceError(RuntimeError):
    """Reachable-set recursion did not settle within the step limit."""


class CoverageError(RuntimeError):
    """Measured deviations cannot be produced by the model's noise channels."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class BudgetExceededError(RuntimeError):
    """Iteration budget exhausted before termination."""


class ConfigError(ValueError):
    """Invalid or missing run configuration."""
