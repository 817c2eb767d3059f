from . import functional
from .core import DEFAULT_DTYPE, NonScalarLossError, Tape, Tensor, backward, grad, no_grad, tensor
from .nn import (
    BatchNorm, Conv2d, GELU, Lambda, LayerNorm, Linear, Module, Parameter, ReLU, Sequential,
)
from .optim import (
    NonFiniteGradientError, Optimizer, OptimizerState, clip_grad_norm, lbfgs_minimize, optimizer_step,
)
from .schedules import BRANCH_SCHEDULES, LRSchedule, lr_at

F = functional

__all__ = [
    "BRANCH_SCHEDULES", "BatchNorm", "Conv2d", "DEFAULT_DTYPE", "F", "GELU", "LRSchedule", "Lambda",
    "LayerNorm", "Linear", "Module", "NonFiniteGradientError", "NonScalarLossError", "Optimizer",
    "OptimizerState", "Parameter", "ReLU", "Sequential", "Tape", "Tensor", "backward", "clip_grad_norm",
    "functional", "grad", "lbfgs_minimize", "lr_at", "no_grad", "optimizer_step", "tensor",
]
