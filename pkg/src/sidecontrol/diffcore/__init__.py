"""Minimal reverse-mode autodiff: graph nodes, ops, AdamW, checkpoints, gradient checks."""
from .graph import (
    GraphError,
    Node,
    ShapeError,
    add,
    backprop,
    concat,
    const,
    embedding,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    lstm_scan,
    matmul,
    mean,
    minimum,
    mul,
    nll_gather,
    no_grad,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    stack,
    sub,
    take_last,
    tanh,
    transpose,
)
from .gradcheck import NondeterministicLoss, finite_diff_check
from .optim import NonFiniteGradient, OptimizerState, adamw_step
from .params import CKPT_HEADER, CheckpointError, Parameter, ParamSet, dumps, loads, uniform_init

__all__ = [name for name in dir() if not name.startswith("_")]
