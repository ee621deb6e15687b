"""Exception types shared across the package."""


class GazecalError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(GazecalError):
    """An input violated a documented precondition."""


class FormatError(GazecalError):
    """A file or byte stream did not match its documented layout."""


class DegenerateGeometryError(GazecalError):
    """A geometric computation has no well-defined answer for this input."""


class StaleCacheError(GazecalError):
    """A backward pass was given a cache built from different inputs."""


class TrainingDivergedError(GazecalError):
    """Training produced a non-finite loss and was aborted."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
