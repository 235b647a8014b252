"""Minimal float64 tensor library with reverse-mode differentiation."""

from mtclip.tensor import ops
from mtclip.tensor.core import Tensor, as_tensor, is_grad_enabled, no_grad
from mtclip.tensor.kernels import BACKEND

__all__ = ["BACKEND", "Tensor", "as_tensor", "is_grad_enabled", "no_grad", "ops"]
