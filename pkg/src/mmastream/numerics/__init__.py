"""Minimal dense-tensor math with reverse-mode differentiation."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamConfig, AdamNoam, adam_noam_step, noam_lr
from .layers import Embedding, Layer, LayerNorm, Linear, param
from .rng import RandomStreams, xavier_uniform
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    custom_op,
    default_dtype,
    div,
    embedding,
    exp,
    getitem,
    layer_norm,
    log,
    log_softmax,
    masked_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
    where,
)

