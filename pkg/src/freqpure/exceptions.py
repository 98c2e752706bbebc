"""Exception types raised across the toolkit."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class TrainingError(RuntimeError):
    """Raised when a toy model fails to train; carries the loss curve."""

    def __init__(self, message, loss_curve=None):
        super().__init__(message)
        self.loss_curve = list(loss_curve or [])


class AttackError(RuntimeError):
    """Raised when an attack run cannot continue (classifier failure, non-finite loss)."""

    def __init__(self, message, iteration=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class SolverError(RuntimeError):
    """Raised by the reverse-time solver when the score turns non-finite."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class ModelLoadError(RuntimeError):
    """Raised when an external checkpoint described by a manifest cannot be loaded."""

    def __init__(self, message, manifest_path=None):
        super().__init__(f"{message} (manifest: {manifest_path})" if manifest_path else message)
        self.manifest_path = manifest_path
