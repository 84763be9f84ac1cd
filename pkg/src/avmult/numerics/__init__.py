from . import ops
from .gradcheck import check_gradients, check_parameter_gradients, numerical_gradient, relative_error
from .layers import Conv1dTemporal, LayerNorm, Linear, Module, he_bound, parameter
from .optim import Adam, adam_step, init_adam_state
from .tensor import ComputationTape, ShapeError, Tensor, as_tensor, no_grad, precision

__all__ = [
    "Adam",
    "ComputationTape",
    "Conv1dTemporal",
    "LayerNorm",
    "Linear",
    "Module",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "check_gradients",
    "check_parameter_gradients",
    "he_bound",
    "init_adam_state",
    "no_grad",
    "numerical_gradient",
    "ops",
    "parameter",
    "precision",
    "relative_error",
]
