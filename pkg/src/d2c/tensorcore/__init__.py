"""Minimal dense-tensor engine: numpy-backed arithmetic, reverse-mode autodiff
on an explicit tape, and Adam. Hot elementwise/optimizer kernels dispatch to a
compiled lane when available (see ``kernels.BACKEND``)."""
from .adam import AdamState, adam_step
from .kernels import BACKEND
from .tensor import (
    DimensionError,
    Tape,
    Tensor,
    add,
    backward,
    conv1d_same,
    elementwise,
    gather_rows,
    get_default_dtype,
    matmul,
    mul,
    precision,
    reduce,
    reshape,
    row_cosine,
    scale,
    set_default_dtype,
    shift,
    silu,
    stack_rows,
    sub,
    tanh,
    tmean,
    tsum,
)

__all__ = [
    "AdamState", "adam_step", "BACKEND", "DimensionError", "Tape", "Tensor",
    "add", "backward", "conv1d_same", "elementwise", "gather_rows",
    "get_default_dtype", "matmul", "mul", "precision", "reduce", "reshape",
    "row_cosine", "scale", "set_default_dtype", "shift", "silu", "stack_rows", "sub",
    "tanh", "tmean", "tsum",
]
