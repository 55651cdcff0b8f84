"""Exception types raised across the package."""


class FlcGridError(Exception):
    """Base class for all package errors."""


class ConfigError(FlcGridError):
    """Invalid or inconsistent run configuration."""


class DimensionMismatch(FlcGridError, ValueError):
    pass


class EmptyGeneratorSet(FlcGridError, ValueError):
    pass


class SingularInterior(FlcGridError):
    """The non-generator block of the admittance matrix cannot be inverted."""


class NoConvergence(FlcGridError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class SimulationError(FlcGridError):
    pass


class FaultOnGeneratorInternalNode(SimulationError, ValueError):
    pass


class NonFiniteState(SimulationError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonIntegralAssignment(FlcGridError, ValueError):
    pass


class ModelArityMismatch(FlcGridError, ValueError):
    pass


class EmptyBatch(FlcGridError, ValueError):
    pass


class DivergedLoss(FlcGridError):
    pass


class ArchitectureMismatch(FlcGridError, ValueError):
    pass


class EmptyClientSet(FlcGridError, ValueError):
    pass


class LengthMismatch(FlcGridError, ValueError):
    pass


class EmptyTrajectory(FlcGridError, ValueError):
    pass


class EmptyGroup(FlcGridError, ValueError):
    pass
