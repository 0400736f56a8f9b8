from .functional import (
    DegenerateDistributionError,
    cross_entropy,
    layer_norm,
    log_softmax,
    rotary,
    rotary_tables,
    softmax,
)
from .gradcheck import check_gradients, numerical_grad, relative_error
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    check_finite,
    concat,
    div,
    exp,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    scatter_rows,
    sigmoid,
    silu,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    take_rows,
    tanh,
    transpose,
    where_const,
)

__all__ = [name for name in dir() if not name.startswith("_")]
