"""Dense tensors with reverse-mode automatic differentiation."""

from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)
from .ops import (
    add,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    global_avg_pool,
    l2_normalize,
    linear,
    log,
    logsumexp,
    matmul,
    maxpool2d,
    mean,
    mul,
    relu,
    reshape,
    scalar_mul,
    stack,
    sub,
    sum,
    transpose,
    upsample_nearest2x,
)
from .nn import Conv2d, Linear, Module, Parameter
from .optim import Adam
from .checkpoint import load_weights, save_weights

__all__ = [name for name in dir() if not name.startswith("_")]
