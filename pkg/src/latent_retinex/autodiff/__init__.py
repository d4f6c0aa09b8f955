"""Dense tensors with reverse-mode automatic differentiation."""

from . import ops
from .tensor import Tape, Tensor, active_tape, as_tensor, backward, no_grad

__all__ = ["Tape", "Tensor", "active_tape", "as_tensor", "backward", "no_grad", "ops"]
