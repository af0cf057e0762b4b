"""Minimal training stack: tape autodiff, param store, Adam, checkpoints."""

from .tensor import (
    DEFAULT_DTYPE,
    FlopCounter,
    ShapeError,
    Tensor,
    add,
    avg_pool,
    concat,
    count_flops,
    cross_entropy,
    gather_rows,
    index,
    layernorm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    softmax,
    stack,
    sum_,
    tanh,
    transpose,
)
from .params import ParamStore, backward
from .optim import Adam, LrSchedule, TrainingDiverged
from .checkpoint import CheckpointError, load_container, save_container

__all__ = [
    "DEFAULT_DTYPE",
    "FlopCounter",
    "ShapeError",
    "Tensor",
    "add",
    "avg_pool",
    "concat",
    "count_flops",
    "cross_entropy",
    "gather_rows",
    "index",
    "layernorm",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "stack",
    "sum_",
    "tanh",
    "transpose",
    "ParamStore",
    "backward",
    "Adam",
    "LrSchedule",
    "TrainingDiverged",
    "CheckpointError",
    "load_container",
    "save_container",
]
