"""Learnable per-axis feature-map resizing for CNNs, on a small numpy autodiff engine."""

from .complexity import GmacsLedger, count_layer_gmacs, gmacs_loss, total_loss
from .data import Dataset, generate
from .network import NetworkSpec, builtin, forward, init_params, replace_resizers
from .pool import ScaleParam, build_geometry, compute_output_size, dynopool_forward
from .tensor import Tensor
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GmacsLedger",
    "NetworkSpec",
    "ScaleParam",
    "Tensor",
    "TrainConfig",
    "build_geometry",
    "builtin",
    "compute_output_size",
    "count_layer_gmacs",
    "dynopool_forward",
    "forward",
    "generate",
    "gmacs_loss",
    "init_params",
    "replace_resizers",
    "total_loss",
    "train",
]
