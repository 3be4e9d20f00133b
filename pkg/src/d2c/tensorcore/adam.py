"""Bias-corrected Adam over a fixed parameter list."""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor


class AdamState:
    """Optimizer state position-aligned with its parameter list.

    Defaults lr=1e-4, betas=(0.9, 0.999). eps sits outside the root:
    a single step from zero moments moves each weight by -lr*g/(|g|+eps).
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update in place; every parameter must carry a gradient."""
        self.step_count += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise ValueError(
                    f"parameter {i} ({p.name or 'unnamed'}) has no gradient; "
                    "run backward(..., params=...) first")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient for parameter {i} ({p.name or 'unnamed'})")
            kernels.adam_update(p.data, g, self.m[i], self.v[i],
                                self.step_count, self.lr, self.beta1,
                                self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(state: AdamState, params=None, grads=None) -> None:
    """Functional face of AdamState.step.

    ``params``/``grads``, when given, must position-match the state's list;
    grads are copied onto the parameters before stepping.
    """
    if params is not None:
        if list(params) != state.params:
            raise ValueError("params do not match the optimizer state's parameter list")
    if grads is not None:
        for p, g in zip(state.params, grads):
            p.grad = np.asarray(g, dtype=p.data.dtype)
    state.step()
