class DomainError(ValueError):
    """Raised when an operation is called outside its valid domain."""


class GridError(DomainError):
    pass


class GenerationError(DomainError):
    pass


class ReplayError(ValueError):
    """Malformed or truncated replay / serialized file."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)
        self.position = position


class TrainingFault(RuntimeError):
    """Non-finite values surfaced during training; the run cannot continue."""
