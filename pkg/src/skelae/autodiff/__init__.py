"""Minimal reverse-mode autodiff with the layer set of the skeleton autoencoder."""

from .conv import IndexMap, conv2d, deconv2d, maxpool2d, maxunpool2d
from .node import (
    Node,
    NonFiniteError,
    ShapeError,
    absolute,
    add,
    as_node,
    backward,
    channel_bias,
    dense,
    flatten,
    grl,
    leaf,
    matmul,
    mean_all,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_cross_entropy,
    square,
    sub,
    sum_all,
)
from .norm import RunningStats, batchnorm2d
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "IndexMap",
    "Node",
    "NonFiniteError",
    "RunningStats",
    "ShapeError",
    "absolute",
    "adam_step",
    "add",
    "as_node",
    "backward",
    "batchnorm2d",
    "channel_bias",
    "conv2d",
    "deconv2d",
    "dense",
    "flatten",
    "grl",
    "leaf",
    "matmul",
    "maxpool2d",
    "maxunpool2d",
    "mean_all",
    "mul",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_cross_entropy",
    "square",
    "sub",
    "sum_all",
]
