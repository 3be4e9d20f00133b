"""Pure-numpy kernel lane.

Implements the same flat-array contract as the compiled lane in
``_fastcore.pyx``: every function takes 1-D contiguous arrays and writes into
a caller-provided output buffer. Shape handling lives one level up in
``kernels.__init__``.
"""
import numpy as np

NAME = "python"


def _sigmoid(x):
    # stable in both tails: never exponentiates a positive argument
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def silu_fwd(x, out):
    np.multiply(x, _sigmoid(x), out=out)


def silu_bwd(x, gy, gx):
    s = _sigmoid(x)
    # d/dx x*s(x) = s + x*s*(1-s)
    np.multiply(gy, s * (1.0 + x * (1.0 - s)), out=gx)


def tanh_fwd(x, out):
    np.tanh(x, out=out)


def tanh_bwd(y, gy, gx):
    # derivative from the forward output: 1 - tanh^2
    np.multiply(gy, 1.0 - y * y, out=gx)


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    # standard bias-corrected Adam; eps sits outside the square root so a
    # single step from zero moments gives exactly -lr*g/(|g|+eps)
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
