from . import functional
from . import checkpoint
from .checkpoint import CheckpointError
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, MLP, Module
from .optim import Adam, adam_step, cosine_anneal
from .tensor import (
    DimensionError,
    NumericalError,
    Parameter,
    Tensor,
    UsageError,
    concat,
    count_macs,
    default_dtype,
    get_default_dtype,
    matmul,
    no_grad,
    scale_grad,
    set_default_dtype,
    stack,
)

__all__ = [
    "Adam",
    "BatchNorm",
    "CheckpointError",
    "Conv2d",
    "DimensionError",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "NumericalError",
    "Parameter",
    "Tensor",
    "UsageError",
    "adam_step",
    "concat",
    "cosine_anneal",
    "count_macs",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "matmul",
    "no_grad",
    "scale_grad",
    "set_default_dtype",
    "stack",
]
