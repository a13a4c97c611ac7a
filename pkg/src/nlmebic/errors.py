"""Exception types shared across the package."""

from __future__ import annotations


class NlmeError(Exception):
    """Base class for all package errors."""


class InputError(NlmeError):
    """Malformed user input (dataset, spec document, config); names the offending field."""


class DomainError(NlmeError):
    """A structural-model precondition was violated (e.g. non-positive rate constant)."""


class DegenerateEigenvaluesError(DomainError):
    """Two-compartment disposition phases are numerically indistinct."""


class OffdiagWithoutDiagError(NlmeError):
    """A correlation was requested between parameters that are not both random."""

    def __init__(self, k: int, l: int):
        super().__init__(
            f"correlation ({k},{l}) requires both diagonal entries to be random"
        )
        self.pair = (k, l)


class TooManyStructuresError(NlmeError):
    """Covariance-structure enumeration above the configured dimension cap."""


class PatternNotParametrizableError(NlmeError):
    """No fill-free Cholesky ordering exists for this covariance pattern (4-cycle)."""


class NonPositiveVarianceError(NlmeError):
    """pack() was called on a theta sitting on the positivity boundary."""


class GridTooLargeError(NlmeError):
    """Tensor quadrature grid would exceed the configured node cap."""


class NonFiniteLikelihoodError(NlmeError):
    """A structural prediction or density was non-finite."""

    def __init__(self, subject_id: str, time_index: int | None = None):
        where = f"subject {subject_id!r}"
        if time_index is not None:
            where += f", observation {time_index}"
        super().__init__(f"non-finite likelihood contribution at {where}")
        self.subject_id = subject_id
        self.time_index = time_index


class InnerNonConvergenceError(NlmeError):
    """The empirical-Bayes inner Newton iteration did not reach its tolerance."""

    def __init__(self, subject_id: str, iterations: int):
        super().__init__(
            f"inner mode search for subject {subject_id!r} did not converge "
            f"after {iterations} iterations"
        )
        self.subject_id = subject_id
        self.iterations = iterations


class NonFiniteObjectiveError(NlmeError):
    """The marginal log-likelihood is non-finite at the starting point."""


class MaxIterationsError(NlmeError):
    """No optimization attempt converged; carries the best-effort result."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result
