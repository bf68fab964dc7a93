"""Exception hierarchy shared across the package."""


class GRNError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GRNError, ValueError):
    """An operation received tensors whose shapes do not fit together."""


class GraphError(GRNError, RuntimeError):
    """Misuse of the autodiff tape (double backward, stale gradients, ...)."""


class DataError(GRNError):
    """Unreadable image, malformed dataset layout or inconsistent manifest."""


class NumericAbort(GRNError, FloatingPointError):
    """Training produced a non-finite loss."""


class CheckpointError(GRNError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
