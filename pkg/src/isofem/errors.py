"""Exception types raised across the package."""


class IsofemError(Exception):
    """Base class for all package errors."""


class UnsupportedElementError(IsofemError, ValueError):
    """Raised for a (dimension, order) pair without a reference element."""


class ReferenceDomainError(IsofemError, ValueError):
    """Raised when a point lies outside the closed reference simplex."""


class MeshParseError(IsofemError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshValidationError(IsofemError, ValueError):
    """Raised when a mesh cannot be constructed from inconsistent tables."""


class PreconditionError(IsofemError, ValueError):
    """Raised when an operation's input does not satisfy its requirements."""


class DegenerateElementError(IsofemError, ArithmeticError):
    def __init__(self, elements, message="degenerate element geometry"):
        self.elements = list(int(e) for e in elements)
        shown = ", ".join(str(e) for e in self.elements[:10])
        more = "" if len(self.elements) <= 10 else f" (+{len(self.elements) - 10} more)"
        super().__init__(f"{message}: elements [{shown}]{more}")


class EvaluationError(IsofemError, ArithmeticError):
    def __init__(self, elements, message="non-finite function values"):
        self.elements = list(int(e) for e in elements)
        super().__init__(f"{message} on elements {self.elements[:10]}")


class SolverError(IsofemError, ArithmeticError):
    """Raised on breakdown or non-convergence of an iterative solver."""

    def __init__(self, message, info=None):
        self.info = info
        super().__init__(message)


class LiftError(IsofemError, ArithmeticError):
    def __init__(self, failed, residuals):
        self.failed = list(int(i) for i in failed)
        self.residuals = list(float(r) for r in residuals)
        super().__init__(
            f"closest-point projection did not converge for {len(self.failed)} point(s); "
            f"max residual {max(self.residuals):.3e}"
        )


class ResourceError(IsofemError, MemoryError):
    """Raised when a request would exceed the configured memory budget."""


class SparseIndexError(IsofemError, IndexError):
    """Raised when a triplet or boundary index is outside the matrix."""


class DimensionError(IsofemError, ValueError):
    """Raised on non-conforming operand shapes."""
