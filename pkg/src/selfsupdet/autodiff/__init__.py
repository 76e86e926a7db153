from .tensor import Tensor, concat, constant, no_grad, parameter, stop_gradient
from . import functional
from . import nn
from . import optim

__all__ = [
    "Tensor",
    "concat",
    "constant",
    "no_grad",
    "parameter",
    "stop_gradient",
    "functional",
    "nn",
    "optim",
]
