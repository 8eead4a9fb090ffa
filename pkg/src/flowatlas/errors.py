"""Shared exception types."""


class FlowAtlasError(Exception):
    """Base class for all library errors."""


class DimensionError(FlowAtlasError, ValueError):
    """Incompatible array dimensions (e.g. latent dim exceeding ambient dim)."""


class NumericalError(FlowAtlasError, ArithmeticError):
    """A non-finite value appeared during evaluation.

    ``op`` names the operation that produced the bad value when known.
    """

    def __init__(self, message, op=None):
        super().__init__(message if op is None else f"{message} (op: {op})")
        self.op = op


class SingularMetricError(NumericalError):
    """The pullback metric (Jacobian Gram matrix) is not positive definite."""


class OffManifoldError(FlowAtlasError, ValueError):
    """A point violated a closeness-to-manifold precondition."""


class ConfigError(FlowAtlasError, ValueError):
    """Invalid or inconsistent configuration."""
