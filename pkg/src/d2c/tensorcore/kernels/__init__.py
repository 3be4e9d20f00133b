"""Kernel backend selection.

Two interchangeable lanes: a compiled Cython extension (``_fastcore``) and a
pure-numpy fallback (``pybackend``). The compiled lane is preferred when it
imported cleanly; ``D2C_KERNELS=python|cython|auto`` overrides. Both lanes
share a flat-array contract; the shaped wrappers here own allocation and
contiguity so callers never care which lane is active.

Determinism is guaranteed per-lane: a fixed lane + fixed inputs is bitwise
reproducible. The two lanes agree to ~ulp on transcendentals (the compiled
lane accumulates in double).
"""
import os

import numpy as np

from . import pybackend

_requested = os.environ.get("D2C_KERNELS", "auto").lower()
_fast = None
if _requested in ("auto", "cython"):
    try:
        from . import _fastcore as _fast
    except ImportError:
        _fast = None
        if _requested == "cython":
            raise ImportError(
                "D2C_KERNELS=cython but the compiled extension is not available"
            )

_impl = _fast if _fast is not None else pybackend

BACKEND = _impl.NAME


def _flat(a):
    a = np.ascontiguousarray(a)
    return a, a.reshape(-1)


def silu_fwd(x):
    x, xf = _flat(x)
    out = np.empty_like(x)
    _impl.silu_fwd(xf, out.reshape(-1))
    return out


def silu_bwd(x, gy):
    x, xf = _flat(x)
    gy, gyf = _flat(gy)
    gx = np.empty_like(x)
    _impl.silu_bwd(xf, gyf, gx.reshape(-1))
    return gx


def tanh_fwd(x):
    x, xf = _flat(x)
    out = np.empty_like(x)
    _impl.tanh_fwd(xf, out.reshape(-1))
    return out


def tanh_bwd(y, gy):
    y, yf = _flat(y)
    gy, gyf = _flat(gy)
    gx = np.empty_like(y)
    _impl.tanh_bwd(yf, gyf, gx.reshape(-1))
    return gx


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    """In-place Adam step on parameter array p (moments m, v updated too)."""
    if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adam_update requires contiguous parameter/moment buffers")
    g = np.ascontiguousarray(g, dtype=p.dtype)
    _impl.adam_update(
        p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
        int(t), float(lr), float(beta1), float(beta2), float(eps),
    )
