from . import ops
from .gradcheck import GradCheckReport, grad_check
from .nn import Conv1d, Conv2d, Dropout, LayerNorm, Linear, Module, ParamSet
from .optim import AdamW, MissingGradientError
from .rng import stream
from .tensor import (
    DomainError,
    NumericalError,
    ShapeError,
    Tensor,
    UsageError,
    as_tensor,
    inject_fault,
    no_grad,
    parameter,
)

__all__ = [
    "ops", "GradCheckReport", "grad_check", "Conv1d", "Conv2d", "Dropout", "LayerNorm",
    "Linear", "Module", "ParamSet", "AdamW", "MissingGradientError", "stream",
    "DomainError", "NumericalError", "ShapeError", "Tensor", "UsageError", "as_tensor",
    "inject_fault", "no_grad", "parameter",
]
