"""Exception types shared across the package."""

from __future__ import annotations


class BundleStructureError(ValueError):
    """Structurally malformed input: dangling ids, missing fields.

    Raised at construction time, before any invariant checking runs.
    """


class ParseError(ValueError):
    """A bundle file could not be parsed."""


class PreconditionError(ValueError):
    """An operation was called with inputs violating its stated preconditions."""


class InvariantError(RuntimeError):
    """A structural invariant that should hold by construction was violated."""


class HypothesisError(ValueError):
    """The hypotheses of the main pipeline fail on the given data.

    Raised before any state is produced; maps to exit code 1 in the CLI.
    """


class HorizonExceeded(RuntimeError):
    """A threshold or cut search ran past the truncation horizon.

    Carries whatever partial trace was accumulated in ``partial``.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class UnsupportedFiberGeometry(ValueError):
    """The fiber is not a 1-manifold graph (a vertex of degree >= 3 exists)."""


class CollarTooNarrow(RuntimeError):
    """No admissible collar halfwidth was found after the allowed halvings."""
