"""Exception types shared across the package.

The CLI maps PreconditionError to exit code 2 and NumericalFailure to
exit code 3; everything else is a bug.
"""


class PreconditionError(ValueError):
    """A documented precondition of an operation was violated."""


class NumericalFailure(RuntimeError):
    """A computation ran but its result cannot be trusted (blow-up,
    non-convergence, guard breach)."""
