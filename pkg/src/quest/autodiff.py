"""Minimal deterministic reverse-mode autodiff on float64 numpy arrays.

A ``Tape`` records operations define-by-run; it is rebuilt every training
step. ``Tensor`` wraps a contiguous float64 array and optionally points at
a tape node. Tensors with no tape behave as constants, so the same model
code runs gradient-free during evaluation at zero tape overhead.

A tape and its tensors are confined to a single thread; independent tapes
may run concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class AutodiffError(Exception):
    """Raised on misuse of the tape or on shape mismatches."""


class NonFiniteError(AutodiffError):
    """Raised when a forward op produces NaN/Inf from finite inputs."""


class Tensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        """Constant copy of this tensor (drops tape participation)."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; constants (floats/arrays) are auto-wrapped
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)


def _scalar_error(t: Tensor):
    raise AutodiffError(f"item() requires a scalar tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("parents", "grad_fn")

    def __init__(self, parents: tuple, grad_fn: GradFn | None):
        self.parents = parents
        self.grad_fn = grad_fn


class Tape:
    """Append-only operation record supporting one backward pass.

    Nodes are pushed in execution order, which is already a topological
    order, so backward() is a single reverse sweep. Calling backward()
    twice is an error: rebuild the tape instead.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._grads: list[np.ndarray | None] | None = None
        self._shapes: list[tuple] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data) -> Tensor:
        """Register a differentiable leaf (parameter or input) on this tape."""
        t = Tensor(data)
        t.tape = self
        t.node_id = self._push((), None, t.data.shape)
        return t

    def _push(self, parents: tuple, grad_fn: GradFn | None, shape: tuple) -> int:
        if self._grads is not None:
            raise AutodiffError("tape already backpropagated; build a fresh tape")
        self._nodes.append(_Node(parents, grad_fn))
        self._shapes.append(shape)
        return len(self._nodes) - 1

    def backward(self, root: Tensor) -> None:
        """Accumulate gradients of a scalar root into every node."""
        if root.tape is not self or root.node_id is None:
            raise AutodiffError("root tensor does not belong to this tape")
        if root.data.size != 1:
            raise AutodiffError(f"backward root must be scalar, got shape {root.shape}")
        if self._grads is not None:
            raise AutodiffError("backward() already called on this tape; rebuild the tape")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[root.node_id] = np.ones_like(root.data)
        for nid in range(root.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.grad_fn is None:
                continue
            parent_grads = node.grad_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient buffer for a tensor on this tape (zeros if unreached)."""
        if self._grads is None:
            raise AutodiffError("backward() has not been called")
        if t.tape is not self or t.node_id is None:
            raise AutodiffError("tensor does not belong to this tape")
        g = self._grads[t.node_id]
        if g is None:
            return np.zeros(self._shapes[t.node_id])
        return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(tensors: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise AutodiffError("operands come from different tapes")
    return tape


def apply_op(inputs: Sequence[Tensor], value: np.ndarray, grad_fn: GradFn) -> Tensor:
    """Register one op result. grad_fn maps the output gradient to one
    gradient per input (None for constants)."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("op produced non-finite values from finite inputs")
    tape = _common_tape(inputs)
    out = Tensor(value)
    if tape is not None:
        parents = tuple(t.node_id if t.tape is tape else None for t in inputs)
        out.tape = tape
        out.node_id = tape._push(parents, grad_fn, out.data.shape)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.data + b.data

    def grad_fn(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return apply_op([a, b], val, grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.data - b.data

    def grad_fn(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return apply_op([a, b], val, grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return [_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)]

    return apply_op([a, b], val, grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    val = a.data / b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return [
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ]

    return apply_op([a, b], val, grad_fn)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    val = np.exp(x.data)
    return apply_op([x], val, lambda g: [g * val])


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.log(x.data)
    xd = x.data
    return apply_op([x], val, lambda g: [g / xd])


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    val = np.sqrt(x.data)
    return apply_op([x], val, lambda g: [g * 0.5 / val])


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return apply_op([x], np.abs(x.data), lambda g: [g * sign])


def clip(x, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    x = _as_tensor(x)
    val = np.clip(x.data, lo, hi)
    inside = np.ones_like(x.data)
    if lo is not None:
        inside = inside * (x.data >= lo)
    if hi is not None:
        inside = inside * (x.data <= hi)
    return apply_op([x], val, lambda g: [g * inside])


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = (x.data > 0).astype(np.float64)
    return apply_op([x], x.data * mask, lambda g: [g * mask])


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-approximation GELU with its exact analytic derivative."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    val = 0.5 * xd * (1.0 + t)
    # d/dx [0.5 x (1 + tanh(u))] with u = c (x + a x^3)
    du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
    deriv = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du
    return apply_op([x], val, lambda g: [g * deriv])


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    val = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))
    return apply_op([x], val, lambda g: [g * val * (1.0 - val)])


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return apply_op([x], x.data.reshape(shape), lambda g: [g.reshape(old)])


def swap_last_axes(x) -> Tensor:
    """Transpose the last two axes (matmul helper)."""
    x = _as_tensor(x)
    val = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return apply_op([x], val, lambda g: [np.swapaxes(g, -1, -2)])


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    val = np.ascontiguousarray(np.transpose(x.data, axes))
    return apply_op([x], val, lambda g: [np.transpose(g, inverse)])


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    val = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    split_at = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return list(np.split(g, split_at, axis=axis))

    return apply_op(tensors, val, grad_fn)


def take(x, key) -> Tensor:
    """Basic slicing with gradient scattered back into zeros."""
    x = _as_tensor(x)
    val = x.data[key]
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[key] = g
        return [out]

    return apply_op([x], np.ascontiguousarray(val), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def _sum_grad(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    val = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape
    return apply_op([x], np.asarray(val), lambda g: [_sum_grad(g, shape, axis, keepdims)])


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    val = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([shape[a] for a in axis]))
    else:
        n = shape[axis]
    return apply_op(
        [x], np.asarray(val), lambda g: [_sum_grad(g, shape, axis, keepdims) / n]
    )


# ---------------------------------------------------------------------------
# linear algebra and attention


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise AutodiffError("matmul requires at least 1-D operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise AutodiffError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    val = a.data @ b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return [_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)]

    return apply_op([a, b], val, grad_fn)


def softmax(x, axis=-1) -> Tensor:
    """Max-stabilized softmax along one axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * val).sum(axis=axis, keepdims=True)
        return [val * (g - dot)]

    return apply_op([x], val, grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise AutodiffError("layer_norm eps must be positive")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gain), bias)


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    Shapes (..., Lq, d), (..., Lk, d), (..., Lk, d) -> (..., Lq, d); leading
    axes broadcast (used for per-frame stacks sharing one global memory).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise AutodiffError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, swap_last_axes(k)), scale)
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# distances and similarities


def mse(a, b) -> Tensor:
    """Mean (not sum) squared error over all elements."""
    d = sub(_as_tensor(a), _as_tensor(b))
    return tmean(mul(d, d))


def l1(a, b) -> Tensor:
    """Mean absolute error over all elements."""
    return tmean(absolute(sub(_as_tensor(a), _as_tensor(b))))


def cosine_sim(a, b, axis=-1, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along one axis, eps-guarded for zero vectors.

    The guard adds eps^2 under each sqrt, keeping gradients finite at the
    origin while leaving unit-scale inputs unchanged to ~1e-12.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    dot = tsum(mul(a, b), axis=axis)
    na = sqrt(add(tsum(mul(a, a), axis=axis), eps * eps))
    nb = sqrt(add(tsum(mul(b, b), axis=axis), eps * eps))
    return div(dot, mul(na, nb))
