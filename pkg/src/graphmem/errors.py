class GraphMemError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GraphMemError):
    """Invalid shapes, hyperparameters, file formats, or config values."""


class DomainError(GraphMemError):
    """Inputs outside an operation's mathematical domain (NaN, bad index, zero-norm row, ...)."""


class TrainingError(GraphMemError):
    """Unrecoverable condition inside a training step (non-finite loss)."""


class CheckpointError(GraphMemError):
    """Corrupt, truncated, or incompatible checkpoint file."""
