class SteinflowError(Exception):
    """Base class for every error raised by steinflow."""


class ContractViolation(SteinflowError, ValueError):
    """An operation was called with inputs outside its contract (shapes, weights, sizes)."""


class ConfigurationError(SteinflowError, ValueError):
    """Invalid parameters. When raised by the config parser, ``errors`` lists every problem."""

    def __init__(self, message: str, errors: list[str] | None = None):
        self.errors = list(errors) if errors else [message]
        super().__init__(message)


class DegenerateEnsembleError(SteinflowError, ValueError):
    pass


class DivergedError(SteinflowError, FloatingPointError):
    """Particle positions became non-finite."""

    def __init__(self, message: str, particle_index: int | None = None,
                 iteration: int | None = None, time: float | None = None):
        self.particle_index = particle_index
        self.iteration = iteration
        self.time = time
        super().__init__(message)


class StepTooLargeError(SteinflowError, ValueError):
    """I + eps * J is numerically singular for some particle."""

    def __init__(self, message: str, particle_index: int | None = None, iteration: int | None = None):
        self.particle_index = particle_index
        self.iteration = iteration
        super().__init__(message)


class TrackingRequiredError(SteinflowError, ValueError):
    pass
