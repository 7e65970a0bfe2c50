"""Exception hierarchy shared by all modules."""


class StopGameError(Exception):
    pass


class ConfigurationError(StopGameError, ValueError):
    """Bad user input: missing callbacks, malformed config, invalid mesh."""


class ParameterError(StopGameError, ValueError):
    """Approximation parameters outside their admissible range."""


class AssumptionViolation(StopGameError):
    """A standing assumption on the model fails on the scan grid."""

    def __init__(self, message, failed=()):
        super().__init__(message)
        self.failed = list(failed)


class ConsistencyError(StopGameError):
    """An identity that must hold by construction was found broken."""


class NumericalError(StopGameError, RuntimeError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class DomainError(StopGameError, ValueError):
    """Operation requested outside the regime where it is defined."""


class SimulationError(StopGameError, RuntimeError):
    pass
