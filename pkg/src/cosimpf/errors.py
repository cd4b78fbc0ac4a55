"""Exception types shared across the package."""


class CosimError(Exception):
    """Base class for all package errors."""


class FrameError(CosimError):
    """Raised when phase-frame and sequence-frame values are mixed."""


class ModelError(CosimError):
    """Invalid network model (topology, schema, or invariant violation)."""


class BaseMismatchError(ModelError):
    """Subsystem models declare different per-unit power bases."""


class PowerFlowError(CosimError):
    """A subsystem power-flow solve failed (singular Jacobian, divergence)."""


class ConvergenceError(CosimError):
    """An iteration loop exhausted its budget without converging."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SingularTheveninError(CosimError):
    """Feeder has no shunt path: driving-point impedance is undefined."""
