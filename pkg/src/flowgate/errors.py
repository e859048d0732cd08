"""Exception types shared across the package.

Module-specific errors live next to the code that raises them; only the
base class and the shape errors used by several modules are defined here.
"""


class FlowgateError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(FlowgateError):
    """Tensor shapes are inconsistent with the operation's contract."""


class DimMismatch(FlowgateError):
    """Two inputs that must share dimensions do not."""
