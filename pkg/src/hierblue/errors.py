"""Exception types shared across the package."""


class HierBlueError(Exception):
    """Base class for all package errors."""


class DimensionError(HierBlueError, ValueError):
    """Operands have incompatible shapes or sizes."""


class SingularMatrixError(HierBlueError):
    """A matrix that must be invertible is (numerically) singular.

    ``block`` names the offending block ("f", "g", "c0", ...) and
    ``node_id`` the tree node, when known.
    """

    def __init__(self, message, block=None, node_id=None):
        super().__init__(message)
        self.block = block
        self.node_id = node_id


class RankError(HierBlueError):
    """A workload or constraint matrix does not have the required rank."""


class ConstraintError(HierBlueError):
    """An equality constraint system is infeasible or rank-deficient."""


class InconsistentEstimatesError(HierBlueError):
    """Two estimates to be combined disagree in a zero-variance direction."""


class SchemaError(HierBlueError):
    """An instance specification or constraint row is malformed."""


class GenerationError(HierBlueError):
    """The constraint policy cannot produce a feasible instance."""


class InfeasibleProblemError(HierBlueError):
    """A constrained optimization problem has an empty feasible region.

    ``violated`` carries labels of the conflicting constraint rows when a
    certificate could be extracted.
    """

    def __init__(self, message, violated=None):
        super().__init__(message)
        self.violated = list(violated or [])


class SolverError(HierBlueError):
    """An iterative solver exceeded its resource budget."""


class CoverageError(HierBlueError):
    """A metric was requested over nodes that are missing estimates."""


class UsageError(HierBlueError):
    """An operation was invoked on inputs missing required data."""
