from .tensor import (
    MASK_FILL,
    DegenerateRowError,
    DimensionError,
    EmptyReductionError,
    GradientTape,
    RankError,
    Tensor,
    add,
    backward,
    concat,
    cross_entropy_logits,
    div,
    dropout,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    softmax,
    sub,
    take_rows,
    tanh,
    transpose,
    tsum,
)
from .optim import AdamState, NonFiniteError, adam_step, clip_by_global_norm, global_norm
from . import checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
