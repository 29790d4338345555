from . import functional
from .gradcheck import backward, finite_difference_check
from .nn import Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tensor,
    as_tensor,
    clip,
    concat,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
    sigmoid,
    silu,
    softmax,
    tanh,
)

__all__ = [
    "Adam",
    "AdamState",
    "Module",
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "clip",
    "concat",
    "default_dtype",
    "finite_difference_check",
    "functional",
    "get_default_dtype",
    "no_grad",
    "set_default_dtype",
    "sigmoid",
    "silu",
    "softmax",
    "tanh",
]
