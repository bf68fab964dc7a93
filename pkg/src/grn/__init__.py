"""Two-branch writer identification network on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BadMagicError,
    CheckpointError,
    DataError,
    GraphError,
    GRNError,
    NumericAbort,
    ShapeError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .model import VariantConfig, build_model, forward, param_census  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402
