"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class MicArrayError(Exception):
    """Base class for all package errors."""


class InvalidConfig(MicArrayError, ValueError):
    """A parameter or file field is outside its valid domain."""


class DegenerateGeometry(MicArrayError, ValueError):
    """A source coincides with an array position (zero distance).

    ``step`` is the 1-based time step at which it happened, when known, and
    ``array`` the 1-based array index.
    """

    def __init__(self, message: str, step: int | None = None, array: int | None = None):
        self.step = step
        self.array = array
        parts = [message]
        if array is not None:
            parts.append(f"array={array}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(" ".join(parts))


class SingularFIM(MicArrayError):
    """The Fisher information matrix is rank deficient (unobservable system).

    Carries the numerical ``rank``, the column count and an orthonormal
    ``null_space`` basis (columns) of the unidentifiable directions.
    """

    def __init__(self, rank: int, n_params: int, null_space):
        self.rank = rank
        self.n_params = n_params
        self.null_space = null_space
        super().__init__(
            f"FIM is singular: rank {rank} < {n_params} "
            f"({n_params - rank} unidentifiable direction(s))"
        )


class SolverError(MicArrayError):
    """Base for solver failures; ``result`` holds the best iterate reached."""

    def __init__(self, message: str, result=None):
        self.result = result
        super().__init__(message)


class NonConvergence(SolverError):
    """Iteration limit reached before any stopping tolerance was met."""


class SingularNormalEquations(SolverError):
    """Gauss-Newton normal equations are singular at the estimate."""
