"""Reverse-mode autodiff over dense float64 tensors."""

from tailnas.autodiff import functional
from tailnas.autodiff.gradcheck import grad_check
from tailnas.autodiff.tensor import Tape, Tensor, active_tape, backward, no_grad

__all__ = ["Tensor", "Tape", "backward", "no_grad", "active_tape", "functional", "grad_check"]
