"""Exception types shared across the solver stack."""

from __future__ import annotations


class NygradError(Exception):
    """Base class for all library errors.

    ``partial_record`` is attached by the bilevel driver when a run aborts
    midway, so callers can inspect what was computed before the failure.
    """

    partial_record = None


class CapabilityError(NygradError):
    """Requested operation exceeds a configured resource cap."""


class IllConditionedError(NygradError):
    """A dense factorization or inner solve failed numerically."""


class DegeneratePivotError(IllConditionedError):
    """Every pivot eigenvalue fell below the floor; no invertible subspace
    is left. Reduce k or increase the regularizer."""


class DivergenceError(NygradError):
    """An iterative solve produced non-finite or runaway values."""

    def __init__(self, message: str, *, last_iterate=None, step: int | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.step = step


class BackendError(NygradError):
    """Wraps a solver failure with the IHVP backend tag attached."""

    def __init__(self, backend: str, cause: Exception):
        super().__init__(f"[{backend}] {cause}")
        self.backend = backend
        self.cause = cause
