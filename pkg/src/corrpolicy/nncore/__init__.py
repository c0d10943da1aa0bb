"""Minimal numpy-backed tensor engine: reverse-mode autodiff, layers, AdamW, checkpoints."""

from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    layer_norm,
    matmul,
    max_pool,
    mse,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    transpose,
)
from .layers import (
    init_attention,
    init_layer_norm,
    init_linear,
    linear,
    multi_head_cross_attention,
    subparams,
)
from .optim import AdamW, adamw_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "add",
    "backward",
    "concat",
    "layer_norm",
    "matmul",
    "max_pool",
    "mse",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "slice_",
    "softmax",
    "transpose",
    "linear",
    "multi_head_cross_attention",
    "subparams",
    "init_linear",
    "init_layer_norm",
    "init_attention",
    "AdamW",
    "adamw_step",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]
