"""Exception hierarchy shared by all modules."""


class GridSensError(Exception):
    """Base class for every error raised by the package."""


class CaseFormatError(GridSensError):
    """A case file could not be parsed (bad JSON, missing key, wrong type)."""


class CaseValidationError(GridSensError):
    """A case parsed but breaks one or more invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(f"{v.code}: {v.message}" for v in self.violations)
        super().__init__(f"case failed validation ({len(self.violations)}): {lines}")


class InfeasibleError(GridSensError):
    """The dispatch problem has no feasible point."""


class SolverError(GridSensError):
    """The QP solver stopped without meeting its tolerances."""


class DegeneracyError(GridSensError):
    """A KKT, local, or coupling matrix is singular at the solution.

    ``period`` is set when the failure comes from a per-period local block.
    """

    def __init__(self, message, period=None):
        self.period = period
        if period is not None:
            message = f"{message} (period {period})"
        super().__init__(message)
