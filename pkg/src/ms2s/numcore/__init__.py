"""Dense tensors with reverse-mode differentiation on top of numpy."""

from . import nn, ops
from .gradcheck import GroupResult, check_gradients, relative_error
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    build_tape,
    default_dtype,
    finite_checks,
    get_default_dtype,
    is_grad_enabled,
    make_op,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "GroupResult",
    "Tensor",
    "as_tensor",
    "backward",
    "build_tape",
    "check_gradients",
    "default_dtype",
    "finite_checks",
    "get_default_dtype",
    "is_grad_enabled",
    "make_op",
    "nn",
    "no_grad",
    "ops",
    "relative_error",
    "set_default_dtype",
]
