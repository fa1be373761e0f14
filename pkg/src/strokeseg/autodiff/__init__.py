"""Reverse-mode automatic differentiation over numpy arrays."""

from .nn import (
    attention,
    batch_norm,
    conv_forward,
    conv_transpose,
    interpolate,
    linear_interp_matrix,
    max_pool,
    nearest_index,
    upsample,
)
from .snapshot import load_snapshot, save_snapshot
from .tensor import (
    ComputationGraph,
    Node,
    NumericError,
    Tensor,
    as_tensor,
    backward,
    clip,
    concat,
    dropout,
    elementwise,
    exp,
    get_dtype,
    grad_enabled,
    gradient_check,
    log,
    matmul,
    mean,
    no_grad,
    pad,
    precision,
    relu,
    reshape,
    set_precision,
    sigmoid,
    softmax,
    tensor,
    transpose,
    tsum,
)
