from . import nn, ops
from .gradcheck import grad_check
from .optim import AdamState, adam_step, clip_global_norm, global_norm
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    high_precision,
    working_dtype,
)

__all__ = [
    "nn", "ops", "grad_check", "AdamState", "adam_step", "clip_global_norm",
    "global_norm", "NonFiniteError", "ShapeError", "Tape", "TapeError", "Tensor",
    "as_tensor", "backward", "high_precision", "working_dtype",
]
