"""Self-contained reverse-mode autodiff used by every network here."""

from . import ops
from .gradcheck import grad_check
from .tensor import Parameter, Tape, Tensor, active_tape, astensor, frozen, no_grad

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "astensor",
    "frozen",
    "no_grad",
    "ops",
    "grad_check",
]
