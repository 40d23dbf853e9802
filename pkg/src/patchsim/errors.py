"""Exception types shared across the package."""


class PatchSimError(Exception):
    """Base class for all package errors."""


class DataError(PatchSimError):
    """Invalid or inconsistent input data (rasters, configs, training sets)."""


class SolverError(PatchSimError):
    """Linear program could not be solved to optimality."""

    def __init__(self, message, kind="error"):
        super().__init__(message)
        self.kind = kind  # "infeasible" | "unbounded" | "error"


class DemandInfeasibleError(PatchSimError):
    """No admissible source cells remain for a class with unmet demand."""

    def __init__(self, class_id, message=None):
        super().__init__(
            message
            or f"demand infeasible: no admissible source cells remain for class {class_id}"
        )
        self.class_id = class_id
