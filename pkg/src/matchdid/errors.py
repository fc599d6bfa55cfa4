"""Exception types shared across the package."""


class MatchDidError(Exception):
    """Base class for all package errors."""


class DomainError(MatchDidError, ValueError):
    """An argument lies outside the domain of the operation."""


class DecompositionError(MatchDidError, ValueError):
    """A matrix factorization failed (e.g. non-positive pivot in Cholesky)."""


class SingularityError(MatchDidError, ValueError):
    """A design or covariance matrix is rank deficient.

    ``columns`` names the offending columns when they can be identified.
    """

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class InfeasibleError(MatchDidError, ValueError):
    """A matching problem has no feasible solution."""


class DataError(MatchDidError, ValueError):
    """Input data is missing records or violates a schema."""


class ReplicationError(MatchDidError, RuntimeError):
    """A Monte Carlo replication failed."""

    def __init__(self, index, cause):
        super().__init__(f"replication {index} failed: {cause!r}")
        self.index = index
        self.cause = cause
