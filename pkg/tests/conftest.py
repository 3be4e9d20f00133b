"""Shared test instruments.

The central one is the finite-difference gradient oracle: central differences
in float64 against whatever the tape produced. Every gradient assertion in
the suite routes through it so the autodiff engine is never used to certify
itself.
"""
import numpy as np
import pytest

from d2c.tensorcore import Tape, precision


def fd_max_rel_err(f, tensors, h=1e-5):
    """Max relative error between tape gradients and central differences.

    f: zero-argument callable returning a scalar Tensor, re-evaluable at
    perturbed parameter values; tensors: parameters to check. Caller is
    responsible for running under ``precision("float64")``.
    """
    with Tape() as tape:
        loss = f()
        tape.backward(loss, params=tensors)
    worst = 0.0
    for t in tensors:
        g = t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = f().item()
            flat[i] = orig - h
            lm = f().item()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            ga = g.reshape(-1)[i]
            err = abs(ga - fd) / max(abs(ga) + abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


@pytest.fixture
def f64():
    """Run a test body in float64 verification mode."""
    with precision("float64"):
        yield


def rng(seed=0):
    return np.random.default_rng(seed)
