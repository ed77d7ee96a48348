"""Exception hierarchy shared across the package."""


class TopoLDMError(Exception):
    """Base class for all package errors."""


class DensityDomainError(TopoLDMError, ValueError):
    """A density value fell outside [0, 1]."""


class FEAError(TopoLDMError):
    pass


class SingularSystemError(FEAError):
    """The stiffness system is rank deficient (rigid-body motion not suppressed)."""


class SolverError(FEAError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConvergenceError(TopoLDMError):
    pass


class SamplingError(TopoLDMError):
    pass


class ShardFormatError(TopoLDMError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointFormatError(TopoLDMError):
    pass


class TrainingDivergedError(TopoLDMError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ShapeError(TopoLDMError, ValueError):
    pass
