"""Exception types shared across the package."""


class SuboptError(Exception):
    """Base class for all package errors."""


class SingularHessian(SuboptError):
    """A Hessian (or sandwich bread) could not be factorized.

    For subsample objectives this is the complement of the event where the
    subsample Hessian stays close to the full-data Hessian; callers running
    Monte Carlo studies count it and skip the replication.
    """


class SingularGram(SuboptError):
    """The design Gram matrix X^T X is rank-deficient."""


class DegeneratePlan(SuboptError):
    """All raw sampling scores are zero, so no probability vector exists."""


class NoConvergence(SuboptError):
    """Newton's method exhausted its iteration budget.

    ``solution`` carries the best iterate found (``converged`` is False).
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution
