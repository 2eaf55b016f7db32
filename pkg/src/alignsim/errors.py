"""Exception hierarchy shared by every module."""


class AlignSimError(Exception):
    """Base class for all package errors."""


class DomainError(AlignSimError, ValueError):
    """An argument lies outside the operation's domain."""


class ShapeError(AlignSimError, ValueError):
    """Vector or matrix dimensions do not agree."""


class ConfigurationError(AlignSimError, ValueError):
    """Inconsistent or invalid configuration."""


class ImmutabilityError(AlignSimError, RuntimeError):
    """Attempt to mutate or differentiate a frozen object."""


class EmptyResultError(DomainError):
    """A query was issued against an empty collection."""


class TrainingDivergedError(AlignSimError, RuntimeError):
    def __init__(self, message, batch_index=None, epoch=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch


class SynthesisUnavailableError(AlignSimError, RuntimeError):
    """The conflict-resolution reviewer failed to produce an answer."""


class GenerationError(AlignSimError, RuntimeError):
    """A synthetic world could not be generated with the requested constraints."""


class MissingArtifactError(AlignSimError, FileNotFoundError):
    def __init__(self, stage, path):
        super().__init__(f"stage '{stage}' requires missing artifact: {path}")
        self.stage = stage
        self.path = str(path)
