from .gradcheck import finite_diff_check, param_finite_diff_check
from .rng import SeededRng
from .tensor import (
    DTYPE,
    LN_EPS,
    ContractError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    gelu,
    getitem,
    grad_enabled,
    grad_of,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    ones,
    permute,
    power,
    randn,
    reshape,
    sigmoid,
    silu,
    softmax,
    split,
    sqrt,
    stop_grad,
    sub,
    tanh,
    tsum,
    zeros,
)

__all__ = [name for name in dir() if not name.startswith("_")]
