"""Custom exceptions for the flamefront toolkit."""


class FlameFrontError(Exception):
    """Base exception for flamefront operations."""
    exit_code = 1


class ConfigError(FlameFrontError):
    """Invalid run configuration or command-line input."""
    exit_code = 2


class ParameterError(ConfigError):
    """Physical or solver parameters outside their valid range."""
    pass


class ShapeError(ConfigError):
    """Array shape does not match what an operation or model expects."""
    pass


class NumericalError(FlameFrontError):
    """A numerical procedure failed."""
    exit_code = 3


class ClosureError(NumericalError):
    """Parameter closure could not bracket a root for mu."""
    pass


class BlowUpError(NumericalError):
    """Solution became non-finite or exceeded the blow-up threshold."""

    def __init__(self, message: str, step: int = -1, time: float = float('nan'),
                 max_abs: float = float('nan')):
        super().__init__(message)
        self.step = step
        self.time = time
        self.max_abs = max_abs


class StepLimitError(NumericalError):
    """Adaptive integrator exceeded its internal step budget."""
    pass


class NonFiniteError(NumericalError):
    """Non-finite values appeared during a recurrent rollout."""

    def __init__(self, message: str, index: int = -1):
        super().__init__(message)
        self.index = index


class NonFiniteGradientError(NumericalError):
    """Optimizer received non-finite gradients."""
    pass


class TrainingDivergedError(NumericalError):
    """Training produced non-finite losses twice in a row."""

    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class NonlinearityError(NumericalError):
    """Jacobian perturbation is too large for the map to be linear."""
    pass


class GraphError(FlameFrontError):
    """Differentiation requested through a detached tensor."""
    exit_code = 3


class StorageError(FlameFrontError):
    """Reading or writing a data file, manifest or checkpoint failed."""
    exit_code = 4
