class DomainError(ValueError):
    """An argument falls outside the domain an operation is defined on."""


class UnsupportedOperationError(TypeError):
    """The operation is not available for this kind of model."""


class CheckpointError(ValueError):
    """A checkpoint directory is corrupt, truncated or of an unknown version."""


class InfeasibleDatasetError(ValueError):
    """Requested split sizes exceed what the instance space can supply."""

    def __init__(self, message, max_total):
        super().__init__(message)
        self.max_total = max_total
