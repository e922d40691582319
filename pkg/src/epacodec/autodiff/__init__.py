"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from . import ops
from .gradcheck import GradCheckResult, finite_diff_check
from .optim import AdamState, NonFiniteGradient, adam_step, clip_global_norm
from .params import CheckpointError, ParamSet, Side, write_atomic
from .tensor import Graph, ShapeError, Tensor, as_tensor, backward, constant

__all__ = [
    "AdamState",
    "CheckpointError",
    "GradCheckResult",
    "Graph",
    "NonFiniteGradient",
    "ParamSet",
    "ShapeError",
    "Side",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "clip_global_norm",
    "constant",
    "finite_diff_check",
    "ops",
    "write_atomic",
]
