"""Dense tensors, reverse-mode autodiff, and a finite-difference oracle."""

from .gradcheck import FiniteDiffError, GradCheckResult, finite_diff_check, numerical_gradient
from .modules import BatchNorm, Conv2d, Linear, Module
from .ops import (
    batch_norm,
    clamped_power,
    concat,
    conv2d,
    cosine_similarity_matrix,
    l2_normalize,
    logsumexp,
    masked_logsumexp,
    matmul,
    relu,
    upsample_nearest,
)
from .tensor import NonFiniteError, Tensor, as_tensor, grad_eval, is_grad_enabled, no_grad

__all__ = [
    "BatchNorm",
    "Conv2d",
    "FiniteDiffError",
    "GradCheckResult",
    "Linear",
    "Module",
    "NonFiniteError",
    "Tensor",
    "as_tensor",
    "batch_norm",
    "clamped_power",
    "concat",
    "conv2d",
    "cosine_similarity_matrix",
    "finite_diff_check",
    "grad_eval",
    "is_grad_enabled",
    "l2_normalize",
    "logsumexp",
    "masked_logsumexp",
    "matmul",
    "no_grad",
    "numerical_gradient",
    "relu",
    "upsample_nearest",
]
