"""Differentiable global marker selection for expression matrices.

Train a relaxed-sampling selector jointly with a classifier and/or a
variational autoencoder, extract a K-gene marker panel, and evaluate it with
the bundled k-NN classifier and reconstruction metrics. See the `cli` module
(console script `markermap`) for the batch interface.
"""

from markermap._core import backend_name
from markermap.errors import (
    DataFormatError,
    MarkerMapError,
    ShapeError,
    TrainingDiverged,
)
from markermap.model import (
    MarkerMapModel,
    TrainConfig,
    TrainReport,
    fit,
    joint_loss,
    load_model,
    random_markers,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "DataFormatError",
    "MarkerMapError",
    "MarkerMapModel",
    "ShapeError",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "backend_name",
    "fit",
    "joint_loss",
    "load_model",
    "random_markers",
    "save_model",
    "__version__",
]
