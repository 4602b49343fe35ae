"""Tensor arithmetic with reverse-mode differentiation and Adam."""

from .adam import AdamHyper, AdamState, adam_step
from .ops import (
    LINEAR_PRIMITIVES,
    PRIMITIVES,
    abs2,
    add,
    avgpool2x,
    cmagnitude,
    concat,
    conv2d,
    fft2c,
    ifft2c,
    instance_norm,
    l1_norm,
    l2_norm,
    leaky_relu,
    mask_select,
    mul,
    mul_const,
    nearest_upsample2x,
    neg,
    reshape,
    scale,
    sqrt_elem,
    sub,
    sum_axis,
    to_complex,
)
from .tensor import COMPLEX, REAL, Tensor, inner, no_grad, value_and_grad

__all__ = [
    "AdamHyper",
    "AdamState",
    "adam_step",
    "COMPLEX",
    "REAL",
    "Tensor",
    "inner",
    "no_grad",
    "value_and_grad",
    "PRIMITIVES",
    "LINEAR_PRIMITIVES",
    "abs2",
    "add",
    "avgpool2x",
    "cmagnitude",
    "concat",
    "conv2d",
    "fft2c",
    "ifft2c",
    "instance_norm",
    "l1_norm",
    "l2_norm",
    "leaky_relu",
    "mask_select",
    "mul",
    "mul_const",
    "nearest_upsample2x",
    "neg",
    "reshape",
    "scale",
    "sqrt_elem",
    "sub",
    "sum_axis",
    "to_complex",
]
