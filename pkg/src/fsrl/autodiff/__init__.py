from . import ops
from .gradcheck import GradCheckReport, KinkError, finite_diff_check, rel_error
from .tensor import (
    DTYPE,
    Node,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    no_grad,
    reset_tape,
)

DiffTensor = Tensor

__all__ = [
    "DTYPE",
    "DiffTensor",
    "GradCheckReport",
    "KinkError",
    "Node",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "current_tape",
    "finite_diff_check",
    "no_grad",
    "ops",
    "rel_error",
    "reset_tape",
]
