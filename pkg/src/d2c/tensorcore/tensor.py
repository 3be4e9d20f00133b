"""Dense tensors with reverse-mode autodiff on an explicit tape.

Design constraints, in order:
  * auditable adjoints — broadcasting is restricted to trailing-dimension
    alignment and every op's vjp is a few lines of numpy;
  * bitwise-deterministic forward passes (numpy/BLAS on fixed inputs);
  * a global precision switch — float32 for training throughput, float64 for
    gradient verification — toggled with ``precision("float64")``.

A tape records ops only while active (``with Tape() as tape``) and only when
an input carries ``requires_grad``. Running without a tape is inference mode.
Tapes are single-use: ``backward`` consumes them.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Shape/axis violation in a tensor operation."""


_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dt}; use float32 or float64")
    _state.dtype = dt.type


def get_default_dtype():
    return np.dtype(_default_dtype())


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. ``precision("float64")``)."""
    prev = _default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar (python scalars route through scale/shift paths)
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    """One recorded op: output tensor + (input, vjp) pairs."""
    __slots__ = ("out", "pairs")

    def __init__(self, out, pairs):
        self.out = out
        self.pairs = pairs


class Tape:
    """Ordered record of executed differentiable ops. Single-use."""

    def __init__(self):
        self._ops: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._ops)

    def backward(self, root: Tensor, params=None) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from root.

        ``params``, when given, is a list of tensors guaranteed a grad buffer
        afterwards (all-zeros if disconnected from root).
        """
        if self._consumed:
            raise RuntimeError("backward already called on this tape")
        if root.shape != ():
            raise DimensionError(
                f"backward root must be scalar-shaped, got shape {root.shape}")
        self._consumed = True
        root.grad = np.ones((), dtype=root.dtype)
        touched = set()
        for node in reversed(self._ops):
            for inp, _ in node.pairs:
                touched.add(inp)
            gout = node.out.grad
            if gout is None:
                continue
            for inp, vjp in node.pairs:
                gin = vjp(gout)
                if inp.grad is None:
                    inp.grad = np.zeros(inp.data.shape, dtype=inp.data.dtype)
                inp.grad += gin
        for t in list(touched) + list(params or []):
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros(t.data.shape, dtype=t.data.dtype)


_ACTIVE_TAPE: Tape | None = None


def backward(tape: Tape, root: Tensor, params=None) -> None:
    tape.backward(root, params=params)


def _record(out: Tensor, pairs) -> None:
    if _ACTIVE_TAPE is not None and pairs:
        _ACTIVE_TAPE._ops.append(_Node(out, pairs))


def _wants_grad(*tensors) -> bool:
    return _ACTIVE_TAPE is not None and any(t.requires_grad for t in tensors)


def _check_trailing_broadcast(sa, sb):
    # trailing alignment only; each aligned pair must match or be 1
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after trailing broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- core ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul expects (m,k)x(k,n) 2-D operands, got {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_wants_grad(a, b))
    pairs = []
    if _ACTIVE_TAPE is not None:
        ad, bd = a.data, b.data
        if a.requires_grad:
            pairs.append((a, lambda g: g @ bd.T))
        if b.requires_grad:
            pairs.append((b, lambda g: ad.T @ g))
        _record(out, pairs)
    return out


def _binary(a: Tensor, b: Tensor, fwd, vjp_a, vjp_b) -> Tensor:
    _check_trailing_broadcast(a.shape, b.shape)
    out = Tensor(fwd(a.data, b.data), requires_grad=_wants_grad(a, b))
    if _ACTIVE_TAPE is not None:
        pairs = []
        if a.requires_grad:
            pairs.append((a, lambda g: _unbroadcast(vjp_a(g), a.shape)))
        if b.requires_grad:
            pairs.append((b, lambda g: _unbroadcast(vjp_b(g), b.shape)))
        _record(out, pairs)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _binary(a, b, np.multiply, lambda g: g * bd, lambda g: g * ad)


def scale(a: Tensor, c) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, requires_grad=_wants_grad(a))
    if a.requires_grad:
        _record(out, [(a, lambda g: g * c)])
    return out


def shift(a: Tensor, c) -> Tensor:
    """Add a python scalar (constant) elementwise."""
    c = float(c)
    out = Tensor(a.data + c, requires_grad=_wants_grad(a))
    if a.requires_grad:
        _record(out, [(a, lambda g: g)])
    return out


def silu(a: Tensor) -> Tensor:
    out = Tensor(kernels.silu_fwd(a.data), requires_grad=_wants_grad(a))
    if a.requires_grad:
        ad = a.data
        _record(out, [(a, lambda g: kernels.silu_bwd(ad, g))])
    return out


def tanh(a: Tensor) -> Tensor:
    y = kernels.tanh_fwd(a.data)
    out = Tensor(y, requires_grad=_wants_grad(a))
    if a.requires_grad:
        _record(out, [(a, lambda g: kernels.tanh_bwd(y, g))])
    return out


def _reduce(a: Tensor, axis, is_mean: bool) -> Tensor:
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
        axis = axis % a.ndim if a.ndim else 0
        if a.shape[axis] == 0:
            raise DimensionError(f"reduction over empty axis {axis} of shape {a.shape}")
        count = a.shape[axis]
    else:
        if a.size == 0:
            raise DimensionError("full reduction of an empty tensor")
        count = a.size
    data = a.data.mean(axis=axis) if is_mean else a.data.sum(axis=axis)
    out = Tensor(data, requires_grad=_wants_grad(a))
    if a.requires_grad:
        shape = a.shape
        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            gin = np.broadcast_to(g, shape).copy()
            return gin / count if is_mean else gin
        _record(out, [(a, vjp)])
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    return _reduce(a, axis, is_mean=False)


def tmean(a: Tensor, axis=None) -> Tensor:
    return _reduce(a, axis, is_mean=True)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}: {e}") from None
    out = Tensor(data, requires_grad=_wants_grad(a))
    if a.requires_grad:
        orig = a.shape
        _record(out, [(a, lambda g: g.reshape(orig))])
    return out


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup into a 2-D table (embedding gather); backward scatter-adds."""
    if table.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D table, got {table.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows expects 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(
            f"gather_rows index out of range [0,{table.shape[0]}) : "
            f"min={idx.min()} max={idx.max()}")
    out = Tensor(table.data[idx], requires_grad=_wants_grad(table))
    if table.requires_grad:
        shape = table.shape

        def vjp(g):
            gt = np.zeros(shape, dtype=g.dtype)
            np.add.at(gt, idx, g)
            return gt
        _record(out, [(table, vjp)])
    return out


def stack_rows(tensors) -> Tensor:
    """Stack 1-D tensors of equal length into a (k, d) matrix."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("stack_rows needs at least one tensor")
    d = tensors[0].shape
    if len(d) != 1 or any(t.shape != d for t in tensors):
        raise DimensionError(
            f"stack_rows expects matching 1-D tensors, got {[t.shape for t in tensors]}")
    out = Tensor(np.stack([t.data for t in tensors]),
                 requires_grad=_wants_grad(*tensors))
    if _ACTIVE_TAPE is not None:
        pairs = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                pairs.append((t, lambda g, i=i: g[i]))
        _record(out, pairs)
    return out


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1-D convolution over a (L, C_in) sequence with same-padding.

    Kernel w has shape (K, C_in, C_out), K odd; bias b is (C_out,).
    """
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv1d_same expects x:(L,Cin) w:(K,Cin,Cout), got {x.shape} and {w.shape}")
    K = w.shape[0]
    if K % 2 != 1:
        raise DimensionError(f"conv1d_same kernel width must be odd, got {K}")
    L, cin = x.shape
    cout = w.shape[2]
    if b.shape != (cout,):
        raise DimensionError(f"conv1d_same bias shape {b.shape} != ({cout},)")
    p = K // 2
    xpad = np.zeros((L + 2 * p, cin), dtype=x.data.dtype)
    xpad[p:p + L] = x.data
    y = np.broadcast_to(b.data, (L, cout)).copy()
    for j in range(K):
        y += xpad[j:j + L] @ w.data[j]
    out = Tensor(y, requires_grad=_wants_grad(x, w, b))
    if _ACTIVE_TAPE is not None:
        wd = w.data
        pairs = []
        if x.requires_grad:
            def vjp_x(g):
                gpad = np.zeros_like(xpad)
                for j in range(K):
                    gpad[j:j + L] += g @ wd[j].T
                return gpad[p:p + L]
            pairs.append((x, vjp_x))
        if w.requires_grad:
            def vjp_w(g):
                gw = np.empty_like(wd)
                for j in range(K):
                    gw[j] = xpad[j:j + L].T @ g
                return gw
            pairs.append((w, vjp_w))
        if b.requires_grad:
            pairs.append((b, lambda g: g.sum(axis=0)))
        _record(out, pairs)
    return out


def row_cosine(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row cosine similarity of two (n, d) matrices -> (n,).

    Norms are clipped at eps in the denominator; the clip is treated as a
    constant in the adjoint (exact away from zero-norm rows).
    """
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(
            f"row_cosine expects matching 2-D shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na = np.maximum(np.sqrt((ad * ad).sum(axis=1)), eps)
    nb = np.maximum(np.sqrt((bd * bd).sum(axis=1)), eps)
    dot = (ad * bd).sum(axis=1)
    c = dot / (na * nb)
    out = Tensor(c, requires_grad=_wants_grad(a, b))
    if _ACTIVE_TAPE is not None:
        pairs = []
        if a.requires_grad:
            pairs.append((a, lambda g: g[:, None] * (
                bd / (na * nb)[:, None] - (c / (na * na))[:, None] * ad)))
        if b.requires_grad:
            pairs.append((b, lambda g: g[:, None] * (
                ad / (na * nb)[:, None] - (c / (nb * nb))[:, None] * bd)))
        _record(out, pairs)
    return out


# ------------------------------------------------------- string-keyed dispatch

_ELEMENTWISE_UNARY = {"silu": silu, "tanh": tanh}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch on kind ∈ {add, sub, mul, scale, silu, tanh}."""
    if kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{kind}' is unary")
        return _ELEMENTWISE_UNARY[kind](a)
    if kind == "scale":
        return scale(a, b)
    if kind in _ELEMENTWISE_BINARY:
        if not isinstance(b, Tensor):
            raise ValueError(f"elementwise '{kind}' needs a second tensor")
        return _ELEMENTWISE_BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise kind '{kind}'")


def reduce(kind: str, a: Tensor, axis=None) -> Tensor:
    if kind == "sum":
        return tsum(a, axis)
    if kind == "mean":
        return tmean(a, axis)
    raise ValueError(f"unknown reduce kind '{kind}'")
