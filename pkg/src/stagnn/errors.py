"""Exception hierarchy shared across the package."""


class StagnnError(Exception):
    """Base class for all package errors."""


class DimensionError(StagnnError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(StagnnError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class UsageError(StagnnError, RuntimeError):
    """An API was called in an invalid state or order."""


class NonFiniteError(StagnnError, FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


class FormatError(StagnnError, ValueError):
    """An input file does not follow the expected layout."""


class ClusteringError(StagnnError, ValueError):
    """Clustering could not produce the requested number of clusters."""


class ConfigError(StagnnError, ValueError):
    """Configuration values are inconsistent."""


class TrainingDiverged(StagnnError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, trial=None, epoch=None):
        super().__init__(message)
        self.trial = trial
        self.epoch = epoch
