"""Exception types shared across the package."""


class TaskcommError(Exception):
    """Base class for errors raised by this package."""


class PowerConstraintViolation(TaskcommError):
    """A channel input exceeds the per-dimension amplitude bound."""


class InsufficientPilots(TaskcommError):
    """Fewer than two pilot symbols were provided for variance estimation."""


class LatencyUndefined(TaskcommError):
    """Digital latency requested on a channel with zero achievable rate."""


class ModelContractViolation(TaskcommError):
    """A model produced output that breaks its interface contract."""


class InvalidArchitecture(TaskcommError):
    """An architecture spec is internally inconsistent."""


class TrainingDiverged(TaskcommError):
    """Training loss became non-finite and could not be recovered."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class CheckpointError(TaskcommError):
    """A checkpoint file is unreadable or incompatible."""
