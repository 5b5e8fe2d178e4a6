"""Exception hierarchy shared by all modules."""


class DcfairError(Exception):
    pass


class SchemaError(DcfairError):
    """A CSV does not match the declared schema."""


class SpecError(DcfairError, ValueError):
    """Invalid experiment settings, caught before any compute starts."""


class ConfigError(DcfairError, ValueError):
    pass


class DomainError(DcfairError, ValueError):
    """Input outside an operation's domain (empty sample, missing group, ...)."""


class ShapeError(DcfairError, ValueError):
    pass


class StateError(DcfairError, RuntimeError):
    pass


class TrainingDiverged(DcfairError, RuntimeError):
    """Raised when a loss becomes non-finite; carries the history so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class ExperimentError(DcfairError, RuntimeError):
    pass
