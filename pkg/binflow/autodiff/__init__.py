from binflow.autodiff.tensor import (
    ComputationTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    fresh_tape,
    get_tape,
    no_grad,
    parameter,
    precision,
    set_default_dtype,
    tensor,
)
from binflow.autodiff.ops import PRIMITIVES, apply_primitive
from binflow.autodiff.optim import (
    AdamOptimizer,
    OptimizerState,
    adam_step,
    clip_by_global_norm,
    clip_by_group_norm,
    learning_rate_at,
)

__all__ = [
    "AdamOptimizer",
    "ComputationTape",
    "NonFiniteError",
    "OptimizerState",
    "PRIMITIVES",
    "ShapeError",
    "Tensor",
    "adam_step",
    "apply_primitive",
    "as_tensor",
    "backward",
    "clip_by_global_norm",
    "clip_by_group_norm",
    "default_dtype",
    "fresh_tape",
    "get_tape",
    "learning_rate_at",
    "no_grad",
    "parameter",
    "precision",
    "set_default_dtype",
    "tensor",
]
