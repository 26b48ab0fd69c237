"""Minimal reverse-mode differentiable compute layer.

Dense affine maps, ReLU, dropout, parameter containers and an Adam optimizer:
exactly what the small networks in this package need, with analytic gradients
checked against finite differences in the test suite.
"""

from .checkpoint import load_params, params_to_payload, payload_to_arrays, save_params
from .gradcheck import finite_difference_gradient, max_relative_error
from .ops import (DropoutMask, asinh, dense_forward, dropout_apply, exp, gammaln, log,
                  log1p, relu, softplus, softplus_inverse, sqrt)
from .optim import Adam, AdamState
from .tensor import Parameter, Tensor, as_tensor, concat

__all__ = [
    "Tensor", "Parameter", "as_tensor", "concat",
    "Adam", "AdamState",
    "DropoutMask", "dense_forward", "dropout_apply",
    "log", "exp", "log1p", "sqrt", "asinh", "softplus", "softplus_inverse",
    "gammaln", "relu",
    "save_params", "load_params", "params_to_payload", "payload_to_arrays",
    "finite_difference_gradient", "max_relative_error",
]
