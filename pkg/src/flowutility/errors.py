"""Exception hierarchy shared across the package."""


class FlowUtilityError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(FlowUtilityError):
    """Bad user-supplied configuration (grids, parameters, counts)."""


class SingularMarketError(FlowUtilityError):
    """sigma' sigma is rank deficient beyond the conditioning threshold."""


class NoArbitrageViolationError(FlowUtilityError):
    """The system sigma' eta = b - r 1 has no solution within tolerance."""


class ConstraintViolationError(FlowUtilityError):
    """A policy vector leaves its prescribed subspace beyond tolerance."""


class SimulationBlowupError(FlowUtilityError):
    """Non-finite values appeared during SDE integration."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class NonInvertibleFlowError(FlowUtilityError):
    """Monotonicity audit failed, so the flow cannot be inverted."""

    def __init__(self, message, offending_paths=()):
        super().__init__(message)
        self.offending_paths = tuple(offending_paths)


class CouplingError(FlowUtilityError):
    """Objects built from different Brownian lattices were combined."""


class RangeError(FlowUtilityError):
    """A query left the sampled range and extrapolation was not permitted."""


class InvalidFieldError(FlowUtilityError):
    """A utility/dual field violates concavity/convexity requirements."""


class InvalidInputError(FlowUtilityError):
    """Non-finite or malformed samples passed to a verification routine."""
