"""Exception hierarchy shared by every rtfgraph module."""

import numpy as np


class RTFGraphError(Exception):
    """Base class for all errors raised by rtfgraph."""


class ShapeError(RTFGraphError, ValueError):
    """Array shapes or dimensions do not match."""


class SignalError(RTFGraphError, ValueError):
    """Invalid signal, signal configuration or audio file."""


class NotPositiveDefiniteError(RTFGraphError, np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(message or f"Matrix is not positive definite (failing pivot index {pivot})")


class ConvergenceError(RTFGraphError):
    """An iterative eigen solver did not converge."""


class GeometryError(RTFGraphError, ValueError):
    """Positions outside the room or an invalid scene layout."""


class ContainerFormatError(RTFGraphError):
    """Malformed or unsupported tensor container."""


class CheckpointError(RTFGraphError):
    """Checkpoint does not match the expected schema or shapes."""


class TrainingDivergedError(RTFGraphError):
    """A training loss became NaN or infinite."""


class ConfigError(RTFGraphError, ValueError):
    """Invalid run configuration."""


class TapeError(RTFGraphError):
    """Misuse of the gradient tape."""
