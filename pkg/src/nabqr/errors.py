"""Exception hierarchy.

Validation errors (bad input, bad configuration) map to CLI exit code 1,
everything else derived from ``NabqrError`` maps to exit code 2.
"""


class NabqrError(Exception):
    """Base class for all package errors."""


class ValidationError(NabqrError, ValueError):
    """Input or configuration rejected before any computation."""


class SchemaError(ValidationError):
    pass


class OrderingError(ValidationError):
    pass


class ArityError(ValidationError):
    pass


class EmptyResultError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class StationarityError(ParameterError):
    pass


class UnderdeterminedError(ValidationError):
    pass


class SingularDesignError(NabqrError):
    """Design matrix (or sliding window) lost full column rank."""


class TrainingError(NabqrError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class StageError(NabqrError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
