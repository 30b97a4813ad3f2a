"""Tensor arithmetic, reverse-mode differentiation, and the optimizer stack."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .optim import (
    OptimizerError,
    OptimizerState,
    ParameterTree,
    adam_step,
    clip_global_norm,
    lr_at_step,
)
from .tensor import (
    ComputationTape,
    NonFiniteError,
    TapeError,
    Tensor,
    TensorError,
    backward,
)

__all__ = [
    "ComputationTape",
    "CheckpointError",
    "NonFiniteError",
    "OptimizerError",
    "OptimizerState",
    "ParameterTree",
    "TapeError",
    "Tensor",
    "TensorError",
    "adam_step",
    "backward",
    "clip_global_norm",
    "load_checkpoint",
    "load_into",
    "lr_at_step",
    "ops",
    "save_checkpoint",
]
