"""Reverse-mode automatic differentiation over dense numpy arrays.

The primitive set is deliberately small: elementwise arithmetic, matmul,
shape moves, reductions, and the activations the network needs. Each op
records a backward closure on its output node; ``backward()`` runs one
reverse topological sweep and refuses to walk the same nodes twice.
Everything is float64 and single-threaded per sweep, which keeps results
bit-deterministic.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True
_DEBUG_GUARD = True


def set_debug_guard(on: bool) -> None:
    """Toggle the NaN/Inf scan applied to every op output (default on)."""
    global _DEBUG_GUARD
    _DEBUG_GUARD = bool(on)


def debug_guard_enabled() -> bool:
    return _DEBUG_GUARD


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array plus an optional gradient slot and tape hooks."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_node(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap an op result; records the tape entry only when grads are live."""
    if _DEBUG_GUARD and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def backward(loss: Tensor) -> None:
    """One reverse sweep from a scalar loss; fills .grad on requires_grad leaves.

    Gradients accumulate (+=) across fan-out. The swept op nodes are marked
    consumed; a second sweep through any of them raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise RuntimeError("backward already ran on this tape")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any differentiable tensor")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, ready = stack.pop()
        if ready:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._spent:
            raise RuntimeError(f"tape already consumed at op '{node._op}'")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        fn = node._backward
        if fn is None:
            continue  # leaf
        grads = fn(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g
        node._spent = True
        node._parents = ()
        node._backward = None
        node.grad = None  # intermediate buffers are dead once propagated


# ---------------------------------------------------------------------------
# elementwise arithmetic (same shape, or one scalar-sized operand)

def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(
            f"{op}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcast supported)"
        )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum().reshape(shape)  # the operand was scalar-sized


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data, "sub")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data, "mul")
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return make_node(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.data, b.data, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    out = x.data * s

    def bw(g):
        return (g * s,)

    return make_node(out, (x,), bw, "scale")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., C] + b[C], the one per-channel affine broadcast that is allowed."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"add_channel_bias: {x.data.shape} vs bias {b.data.shape}")
    out = x.data + b.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        return g, g.sum(axis=lead)

    return make_node(out, (x, b), bw, "add_channel_bias")


# ---------------------------------------------------------------------------
# matmul and shape moves

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(out, (a, b), bw, "matmul")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    src = x.data.shape

    def bw(g):
        return (g.reshape(src),)

    return make_node(out, (x,), bw, "reshape")


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make_node(out, (x,), bw, "permute")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return make_node(out, tuple(ts), bw, "concat")


def split(x, sizes, axis: int = 0):
    """Split along an axis into pieces of the given sizes; inverse of concat."""
    x = as_tensor(x)
    if sum(sizes) != x.data.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis {axis} of {x.data.shape}")
    outs = []
    offset = 0
    for s in sizes:
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(offset, offset + s)
        sl = tuple(sl)
        piece = np.ascontiguousarray(x.data[sl])

        def bw(g, _sl=sl):
            full = np.zeros_like(x.data)
            full[_sl] = g
            return (full,)

        outs.append(make_node(piece, (x,), bw, "split"))
        offset += s
    return outs


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    src = x.data.shape

    def bw(g):
        gg = g
        if not keepdims and axes is not None:
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        return (np.broadcast_to(gg, src).copy() if gg.shape != src else gg.copy(),)

    return make_node(out, (x,), bw, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.data.ndim)
    if axes is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)
    src = x.data.shape

    def bw(g):
        gg = g / count
        if not keepdims and axes is not None:
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        return (np.broadcast_to(gg, src).copy(),)

    return make_node(out, (x,), bw, "mean")


# ---------------------------------------------------------------------------
# pointwise nonlinearities

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return make_node(out, (x,), bw, "exp")


def log(x, floor: float = 1e-12) -> Tensor:
    """Natural log with a floor clamp; gradient is zero in the clamped region."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor)
    out = np.log(clamped)
    live = x.data > floor

    def bw(g):
        return (np.where(live, g / clamped, 0.0),)

    return make_node(out, (x,), bw, "log")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    out = np.abs(x.data)
    sgn = np.sign(x.data)

    def bw(g):
        return (g * sgn,)

    return make_node(out, (x,), bw, "abs")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # stable in both tails: exp(-|z|) never overflows
    t = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), bw, "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return make_node(out, (x,), bw, "silu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    live = x.data > 0

    def bw(g):
        return (np.where(live, g, 0.0),)

    return make_node(out, (x,), bw, "relu")


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.data > 0, x.data, slope * x.data)
    live = x.data > 0

    def bw(g):
        return (np.where(live, g, slope * g),)

    return make_node(out, (x,), bw, "leaky_relu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s,)

    return make_node(out, (x,), bw, "softplus")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_node(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# binary tensor dump (.tsr): u32 rank, rank x u32 dims, float64 payload, all LE

def save_tsr(path, x) -> None:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f8").tobytes())


def load_tsr(path) -> Tensor:
    with open(path, "rb") as f:
        (rank,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
        payload = np.frombuffer(f.read(), dtype="<f8")
    expected = int(np.prod(dims)) if dims else 1
    if payload.size != expected:
        raise ValueError(f"corrupt .tsr file: {payload.size} values for dims {dims}")
    return Tensor(payload.reshape(dims).astype(np.float64))
