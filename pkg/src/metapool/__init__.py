"""Meta-learned pooling layers with trainable kernel shapes and Lp exponents."""

from metapool.tensor import (
    DomainError,
    Record,
    ReplayError,
    ShapeError,
    Tensor,
    TensorError,
    apply_primitive,
    finite_difference_check,
    grad,
)

__all__ = [
    "DomainError",
    "Record",
    "ReplayError",
    "ShapeError",
    "Tensor",
    "TensorError",
    "apply_primitive",
    "finite_difference_check",
    "grad",
]
