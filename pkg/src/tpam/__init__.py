"""TPAM classifiers: low-rank polynomial models with self-interpretation and CAM saliency."""

from .model import (
    ModelConfig,
    PatchSpec,
    TpamModel,
    backward,
    backward_batch,
    finite_difference_gradient,
    forward,
    forward_batch,
    forward_dense_oracle,
    init_poly_mean,
    parameter_count,
)

__version__ = "0.1.0"
