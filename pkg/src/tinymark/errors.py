"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class TinymarkError(Exception):
    """Base class for all errors raised by this package."""


class ConfigSyntaxError(TinymarkError):
    """The configuration document is not well-formed YAML."""


class ValidationError(TinymarkError):
    """A field violates its invariant.

    ``path`` is the dotted/indexed location of the offending field, e.g.
    ``convs_params[0]``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


class UnsupportedModelType(TinymarkError):
    pass


class ShapeError(TinymarkError):
    pass


class UnsupportedCombination(TinymarkError):
    pass


class NonFiniteOutput(TinymarkError):
    pass


class UnsupportedOp(TinymarkError):
    pass


class ShapeMismatch(TinymarkError):
    pass


class NotRun(TinymarkError):
    pass


class Infeasible(TinymarkError):
    """No arena size within the device limits lets the model run."""


class NonMonotoneOracle(TinymarkError):
    """The trial oracle contradicted an earlier observation."""


class SelectionError(TinymarkError):
    """Invalid pipeline selection (maps to exit code 2)."""


class EmptySelection(SelectionError):
    pass
